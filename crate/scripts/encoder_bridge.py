"""DinoV2 patch-token worker for `plantseg --encoder plantnet-dinov2|dinov2-base`.

Needs torch, timm, numpy and pillow. Options (config `[encoders.<id>.options]`):
  arch    timm model name, default vit_base_patch14_reg4_dinov2 for
          plantnet-dinov2 and vit_base_patch14_dinov2 for dinov2-base
  device  torch device, default cuda when available
  key     state-dict key inside the checkpoint, default "state_dict" or "model"
          when present
"""

import numpy as np
import torch
from PIL import Image

from bridge_common import device, serve

DEFAULT_ARCH = {
    "plantnet-dinov2": "vit_base_patch14_reg4_dinov2",
    "dinov2-base": "vit_base_patch14_dinov2",
}
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

state = {}


def load(req):
    import timm

    options = req.get("options") or {}
    arch = options.get("arch") or DEFAULT_ARCH.get(req["backend"])
    if arch is None:
        raise ValueError(f"no default architecture for backend {req['backend']!r}; set options.arch")
    model = timm.create_model(arch, pretrained=False, num_classes=0, dynamic_img_size=True)
    ckpt = torch.load(req["checkpoint"], map_location="cpu", weights_only=False)
    key = options.get("key")
    if key:
        ckpt = ckpt[key]
    else:
        for k in ("state_dict", "model"):
            if isinstance(ckpt, dict) and k in ckpt:
                ckpt = ckpt[k]
                break
    ckpt = {k.removeprefix("module."): v for k, v in ckpt.items()}
    missing, unexpected = model.load_state_dict(ckpt, strict=False)
    missing = [k for k in missing if not k.startswith("head")]
    if missing:
        raise ValueError(f"checkpoint lacks {len(missing)} backbone tensors, e.g. {missing[:3]}")
    dev = device(options)
    state.update(model=model.eval().to(dev), device=dev)
    return {
        "info": {
            "arch": arch,
            "embed_dim": model.num_features,
            "prefix_tokens": model.num_prefix_tokens,
            "ignored_keys": len(unexpected),
            "device": str(dev),
        }
    }


@torch.inference_mode()
def encode(req):
    model = state["model"]
    img = np.asarray(Image.open(req["image"]).convert("RGB"), dtype=np.float32) / 255.0
    rows, cols = req["rows"], req["cols"]
    patch = model.patch_embed.patch_size[0]
    if img.shape[:2] != (rows * patch, cols * patch):
        raise ValueError(f"image is {img.shape[:2]}, expected {(rows * patch, cols * patch)}")
    x = torch.from_numpy((img - MEAN) / STD).permute(2, 0, 1)[None].to(state["device"])
    tokens = model.forward_features(x)[0, model.num_prefix_tokens :]
    if tokens.shape[0] != rows * cols:
        raise ValueError(f"model returned {tokens.shape[0]} patch tokens, expected {rows * cols}")
    tokens.float().cpu().numpy().astype("<f4").tofile(req["output"])
    return {"dim": int(tokens.shape[1])}


if __name__ == "__main__":
    serve({"load": load, "encode": encode})
