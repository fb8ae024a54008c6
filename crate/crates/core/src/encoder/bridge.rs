use image::RgbImage;
use serde_json::{json, Value};

use super::{EncoderId, TokenGrid};
pub use crate::bridge::BridgeConfig;
use crate::bridge::Worker;
use crate::error::{Error, Result};
use crate::preprocess::GeometrySpec;

/// DinoV2-family encoder served by an external worker.
///
/// The worker receives the padded image and must return the final-layer patch
/// tokens (class and register tokens dropped) for the full token grid,
/// interpolating its positional embedding as needed. Reply:
/// `{"ok": true, "dim": D}` with `rows * cols * D` little-endian f32 values
/// written to the requested output path.
pub struct BridgeEncoder {
    id: EncoderId,
    worker: Worker,
    counter: usize,
}

impl BridgeEncoder {
    pub fn spawn(id: EncoderId, config: &BridgeConfig) -> Result<Self> {
        if id == EncoderId::Synthetic {
            return Err(Error::invalid("the synthetic encoder runs in-process"));
        }
        Ok(Self {
            id,
            worker: Worker::spawn(id.as_str(), config)?,
            counter: 0,
        })
    }

    /// Whatever the worker reported about the loaded model.
    pub fn info(&self) -> &Value {
        &self.worker.info
    }
}

impl super::Encoder for BridgeEncoder {
    fn id(&self) -> &str {
        self.id.as_str()
    }

    fn encode(&mut self, image: &RgbImage, spec: &GeometrySpec) -> Result<TokenGrid> {
        self.counter += 1;
        let input = self.worker.scratch().join(format!("in_{}.png", self.counter));
        let output = self.worker.scratch().join(format!("out_{}.f32", self.counter));
        image.save(&input)?;
        let reply = self.worker.call(json!({
            "op": "encode",
            "image": input,
            "output": output,
            "rows": spec.token_rows,
            "cols": spec.token_cols,
        }))?;
        let dim = reply.get("dim").and_then(Value::as_u64).unwrap_or(0) as usize;
        let bytes = std::fs::read(&output)?;
        let _ = std::fs::remove_file(&input);
        let _ = std::fs::remove_file(&output);
        let features: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        TokenGrid::new(features, dim, *spec, self.id.as_str()).map_err(|e| Error::Backend {
            backend: self.id.to_string(),
            message: e.to_string(),
        })
    }
}
