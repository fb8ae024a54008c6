//! Promptable mask refinement.

use std::str::FromStr;

use image::RgbImage;
use serde_json::{json, Value};

pub use crate::bridge::BridgeConfig;
use crate::bridge::Worker;
use crate::error::{Error, Result};
use crate::maskops::{union, BoxPrompt, CoarseMask, COARSE_SIZE};
use crate::raster::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefinerId {
    Sam2,
    Trivial,
}

impl RefinerId {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefinerId::Sam2 => "sam2",
            RefinerId::Trivial => "trivial",
        }
    }
}

impl std::fmt::Display for RefinerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RefinerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sam2" => Ok(Self::Sam2),
            "trivial" => Ok(Self::Trivial),
            other => Err(Error::UnknownBackend(other.to_string())),
        }
    }
}

/// Mask prompt attached to every box of one image.
#[derive(Debug, Clone, Copy)]
pub struct MaskInput<'a> {
    pub coarse: &'a CoarseMask,
    /// Magnitude of the signed confidence map derived from `coarse`.
    pub logit: f32,
}

/// A promptable segmentation model. One call segments one object.
pub trait Refiner {
    fn id(&self) -> &str;

    /// Mask at the image's (padded) resolution for a single box prompt.
    fn refine_box(&mut self, image: &RgbImage, prompt: &BoxPrompt, mask: Option<MaskInput<'_>>) -> Result<Mask>;
}

/// Runs the refiner once per prompt and unions the results. No prompts
/// yields an all-false mask.
pub fn refine(
    refiner: &mut dyn Refiner,
    image: &RgbImage,
    prompts: &[BoxPrompt],
    mask: Option<MaskInput<'_>>,
) -> Result<Mask> {
    let dims = (image.height() as usize, image.width() as usize);
    for p in prompts {
        if p.x_min > p.x_max || p.y_min > p.y_max || p.y_max >= dims.0 || p.x_max >= dims.1 {
            return Err(Error::InvalidBox(format!("{p:?} outside {}x{} image", dims.0, dims.1)));
        }
    }
    let masks = prompts
        .iter()
        .map(|p| refiner.refine_box(image, p, mask))
        .collect::<Result<Vec<_>>>()?;
    union(&masks, dims)
}

/// Weight-free reference refiner: the box rectangle, intersected with the
/// nearest-neighbor upsampled coarse mask when one is given.
#[derive(Debug, Default, Clone)]
pub struct TrivialRefiner;

impl Refiner for TrivialRefiner {
    fn id(&self) -> &str {
        "trivial"
    }

    fn refine_box(&mut self, image: &RgbImage, prompt: &BoxPrompt, mask: Option<MaskInput<'_>>) -> Result<Mask> {
        let (h, w) = (image.height() as usize, image.width() as usize);
        let mut out = Mask::new(h, w);
        out.fill_rect(prompt.y_min, prompt.x_min, prompt.y_max, prompt.x_max);
        if let Some(MaskInput { coarse, .. }) = mask {
            if coarse.spec.padded_dims() != (h, w) {
                return Err(Error::DimensionMismatch {
                    expected: (h, w),
                    found: coarse.spec.padded_dims(),
                });
            }
            let up = coarse.upsample();
            out.as_mut_slice()
                .iter_mut()
                .zip(up.as_slice())
                .for_each(|(o, &c)| *o &= c);
        }
        Ok(out)
    }
}

/// SAM2 served by an external worker.
///
/// Request `{"op": "refine", "image", "box": [x0, y0, x1, y1], "mask_input",
/// "output"}`; `mask_input` is null or a file of `256 * 256` little-endian f32
/// logits. The worker writes a 0/255 PNG at the image's resolution to `output`
/// and replies `{"ok": true, "score": s}`. With several candidate masks the
/// worker returns its highest-scoring one and says so in its load `info`.
pub struct Sam2Refiner {
    worker: Worker,
    image_key: Option<String>,
    counter: usize,
    image_path: std::path::PathBuf,
    pub scores: Vec<f64>,
}

impl Sam2Refiner {
    pub fn spawn(config: &BridgeConfig) -> Result<Self> {
        let worker = Worker::spawn("sam2", config)?;
        let image_path = worker.scratch().join("image.png");
        Ok(Self {
            worker,
            image_key: None,
            counter: 0,
            image_path,
            scores: Vec::new(),
        })
    }

    pub fn info(&self) -> &Value {
        &self.worker.info
    }
}

impl Refiner for Sam2Refiner {
    fn id(&self) -> &str {
        "sam2"
    }

    fn refine_box(&mut self, image: &RgbImage, prompt: &BoxPrompt, mask: Option<MaskInput<'_>>) -> Result<Mask> {
        // reuse the written image (and the worker's embedding) across boxes
        let key = crate::encoder::content_hash(image);
        if self.image_key.as_deref() != Some(key.as_str()) {
            image.save(&self.image_path)?;
            self.image_key = Some(key);
        }
        self.counter += 1;
        let output = self.worker.scratch().join(format!("mask_{}.png", self.counter));
        let mask_path = match mask {
            Some(MaskInput { coarse, logit }) => {
                let path = self.worker.scratch().join(format!("mask_in_{}.f32", self.counter));
                let logits = coarse.to_logits(logit);
                debug_assert_eq!(logits.len(), COARSE_SIZE * COARSE_SIZE);
                let bytes: Vec<u8> = logits.iter().flat_map(|v| v.to_le_bytes()).collect();
                std::fs::write(&path, bytes)?;
                Some(path)
            }
            None => None,
        };
        let reply = self.worker.call(json!({
            "op": "refine",
            "image": self.image_path,
            "box": [prompt.x_min, prompt.y_min, prompt.x_max, prompt.y_max],
            "mask_input": mask_path,
            "output": output,
        }))?;
        if let Some(s) = reply.get("score").and_then(Value::as_f64) {
            self.scores.push(s);
        }
        let out = Mask::load_png(&output)?;
        let _ = std::fs::remove_file(&output);
        if let Some(p) = mask_path {
            let _ = std::fs::remove_file(p);
        }
        let dims = (image.height() as usize, image.width() as usize);
        if out.dims() != dims {
            return Err(Error::Backend {
                backend: "sam2".into(),
                message: format!("mask is {:?}, expected {dims:?}", out.dims()),
            });
        }
        Ok(out)
    }
}
