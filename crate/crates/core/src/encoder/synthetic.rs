use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Encoder, TokenGrid};
use crate::error::Result;
use crate::preprocess::GeometrySpec;
use crate::synth::is_plant_pixel;

pub const SYNTHETIC_DIM: usize = 64;

/// Distance between the two cluster means, in units of the per-coordinate
/// standard deviation.
pub const SYNTHETIC_SEPARATION: f32 = 6.0;

/// Deterministic stand-in for a vision transformer.
///
/// Each token whose content pixels are mostly plant-colored draws its feature
/// vector from cluster A, every other token from cluster B. Both clusters are
/// isotropic unit Gaussians in 64 dimensions whose means differ by
/// [`SYNTHETIC_SEPARATION`] along coordinate 0. Noise is seeded from the
/// encoder seed and the image content, so repeated calls are bit-identical.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    seed: u64,
    calls: usize,
}

impl SyntheticEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seed, calls: 0 }
    }

    /// Number of images encoded so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn cluster_mean(plant: bool) -> [f32; SYNTHETIC_DIM] {
        let mut mean = [0.0; SYNTHETIC_DIM];
        mean[0] = if plant { 0.5 } else { -0.5 } * SYNTHETIC_SEPARATION;
        mean
    }

    fn rng_for(&self, image: &RgbImage) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(image.width().to_le_bytes());
        h.update(image.height().to_le_bytes());
        h.update(image.as_raw());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

impl Encoder for SyntheticEncoder {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn encode(&mut self, image: &RgbImage, spec: &GeometrySpec) -> Result<TokenGrid> {
        self.calls += 1;
        let mut rng = self.rng_for(image);
        let p = spec.patch;
        let mut features = Vec::with_capacity(spec.token_rows * spec.token_cols * SYNTHETIC_DIM);
        for r in 0..spec.token_rows {
            for c in 0..spec.token_cols {
                let plant = !spec.is_pad_token(r, c) && {
                    let ys = r * p..((r + 1) * p).min(spec.resized_h);
                    let xs = c * p..((c + 1) * p).min(spec.resized_w);
                    let total = ys.len() * xs.len();
                    let green = ys
                        .flat_map(|y| xs.clone().map(move |x| (y, x)))
                        .filter(|&(y, x)| is_plant_pixel(image.get_pixel(x as u32, y as u32)))
                        .count();
                    2 * green >= total
                };
                let mean = Self::cluster_mean(plant);
                for m in mean {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    features.push(m + z);
                }
            }
        }
        TokenGrid::new(features, SYNTHETIC_DIM, *spec, "synthetic")
    }
}
