"""SAM2 box-prompt worker for `plantseg --refiner sam2`.

Needs torch, numpy, pillow and the `sam2` package. Options (config
`[refiners.sam2.options]`):
  config     model config name, default configs/sam2.1/sam2.1_hiera_l.yaml
  device     torch device, default cuda when available
  multimask  ask for three candidates and keep the best scoring, default false
"""

import hashlib

import numpy as np
import torch
from PIL import Image

from bridge_common import device, serve

COARSE = 256

state = {}


def load(req):
    from sam2.build_sam import build_sam2
    from sam2.sam2_image_predictor import SAM2ImagePredictor

    options = req.get("options") or {}
    config = options.get("config", "configs/sam2.1/sam2.1_hiera_l.yaml")
    dev = device(options)
    model = build_sam2(config, req["checkpoint"], device=dev)
    state.update(predictor=SAM2ImagePredictor(model), image=None, multimask=bool(options.get("multimask", False)))
    return {"info": {"config": config, "device": str(dev), "multimask": state["multimask"]}}


@torch.inference_mode()
def refine(req):
    predictor = state["predictor"]
    # the parent rewrites one path per image, so key the embedding on content
    with open(req["image"], "rb") as f:
        key = hashlib.sha256(f.read()).hexdigest()
    if state["image"] != key:
        predictor.set_image(np.asarray(Image.open(req["image"]).convert("RGB")))
        state["image"] = key
    x0, y0, x1, y1 = req["box"]
    # inclusive pixel box to a continuous xyxy box
    box = np.array([x0, y0, x1 + 1, y1 + 1], dtype=np.float32)
    mask_input = None
    if req.get("mask_input"):
        mask_input = np.fromfile(req["mask_input"], dtype="<f4").reshape(1, COARSE, COARSE)
    masks, scores, _ = predictor.predict(
        box=box,
        mask_input=mask_input,
        multimask_output=state["multimask"],
        normalize_coords=True,
    )
    best = int(np.argmax(scores))
    Image.fromarray((masks[best] > 0).astype(np.uint8) * 255).save(req["output"])
    return {"score": float(scores[best])}


if __name__ == "__main__":
    serve({"load": load, "refine": refine})
