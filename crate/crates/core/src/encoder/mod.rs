//! Patch-token feature extraction behind a uniform [`Encoder`] interface.

mod bridge;
mod cache;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use bridge::{BridgeConfig, BridgeEncoder};
pub use cache::{content_hash, read_grid, CachedGrids, FeatureCache};
pub use synthetic::{SyntheticEncoder, SYNTHETIC_DIM, SYNTHETIC_SEPARATION};

use crate::error::{Error, Result};
use crate::preprocess::GeometrySpec;
use crate::raster::check_dims;

/// Known feature extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderId {
    #[serde(rename = "plantnet-dinov2")]
    PlantnetDinov2,
    #[serde(rename = "dinov2-base")]
    Dinov2Base,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl EncoderId {
    pub const ALL: [EncoderId; 3] = [
        EncoderId::PlantnetDinov2,
        EncoderId::Dinov2Base,
        EncoderId::Synthetic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderId::PlantnetDinov2 => "plantnet-dinov2",
            EncoderId::Dinov2Base => "dinov2-base",
            EncoderId::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for EncoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownBackend(s.to_string()))
    }
}

/// Per-patch output tokens of one image, row-major over the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    features: Vec<f32>,
    dim: usize,
    spec: GeometrySpec,
    encoder_id: String,
    pad_mask: Vec<bool>,
}

impl TokenGrid {
    pub fn new(features: Vec<f32>, dim: usize, spec: GeometrySpec, encoder_id: impl Into<String>) -> Result<Self> {
        let tokens = spec.token_rows * spec.token_cols;
        if dim == 0 || features.len() != tokens * dim {
            return Err(Error::invalid(format!(
                "feature buffer of {} values does not match a {}x{}x{dim} grid",
                features.len(),
                spec.token_rows,
                spec.token_cols
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature at flat index {i}")));
        }
        Ok(Self {
            features,
            dim,
            pad_mask: spec.pad_mask(),
            spec,
            encoder_id: encoder_id.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.spec.token_rows
    }

    pub fn cols(&self) -> usize {
        self.spec.token_cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> &GeometrySpec {
        &self.spec
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    #[inline]
    pub fn is_pad(&self, row: usize, col: usize) -> bool {
        self.pad_mask[row * self.cols() + col]
    }

    #[inline]
    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.cols() + col) * self.dim;
        &self.features[i..i + self.dim]
    }

    /// Feature vectors of all tokens that touch image content, in grid order.
    pub fn content_tokens(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.features
            .chunks_exact(self.dim)
            .zip(&self.pad_mask)
            .filter(|(_, &pad)| !pad)
            .map(|(t, _)| t)
    }

    pub fn content_token_count(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    /// Multiplies every feature by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        out.features.iter_mut().for_each(|v| *v *= factor);
        out
    }
}

/// A token-feature extractor. Instances may hold large model state and are
/// used from one worker at a time.
pub trait Encoder {
    fn id(&self) -> &str;

    /// Produces the grid for an image already laid out per `spec`. Callers go
    /// through [`extract`], which validates the input first.
    fn encode(&mut self, image: &RgbImage, spec: &GeometrySpec) -> Result<TokenGrid>;
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn encode(&mut self, image: &RgbImage, spec: &GeometrySpec) -> Result<TokenGrid> {
        (**self).encode(image, spec)
    }
}

/// Extracts the token grid of a preprocessed (padded) image.
pub fn extract(encoder: &mut dyn Encoder, image: &RgbImage, spec: &GeometrySpec) -> Result<TokenGrid> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    if h % spec.patch != 0 || w % spec.patch != 0 {
        return Err(Error::NotPatchAligned {
            height: h,
            width: w,
            patch: spec.patch,
        });
    }
    check_dims(image, spec.padded_dims())?;
    let grid = encoder.encode(image, spec)?;
    if (grid.rows(), grid.cols()) != spec.token_dims() {
        return Err(Error::Backend {
            backend: encoder.id().to_string(),
            message: format!(
                "returned a {}x{} grid for a {}x{} token layout",
                grid.rows(),
                grid.cols(),
                spec.token_rows,
                spec.token_cols
            ),
        });
    }
    Ok(grid)
}

/// One image handed to [`extract_batch`].
pub struct EncodeRequest<'a> {
    pub image: &'a RgbImage,
    pub spec: &'a GeometrySpec,
}

/// Extracts grids for a batch, serving and filling the on-disk cache when given.
pub fn extract_batch(
    encoder: &mut dyn Encoder,
    requests: &[EncodeRequest<'_>],
    cache: Option<&FeatureCache>,
) -> Result<Vec<TokenGrid>> {
    requests
        .iter()
        .map(|req| match cache {
            Some(cache) => cache.get_or_compute(encoder, req.image, req.spec),
            None => extract(encoder, req.image, req.spec),
        })
        .collect()
}
