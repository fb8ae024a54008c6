//! Deterministic synthetic plant scenes with known ground truth.
//!
//! Plants are drawn in a saturated green and soil in a brown, each with bounded
//! per-channel noise, so the two classes are separable by excess green with a
//! wide margin. [`PLANT_EXG_THRESHOLD`] sits between the two ranges.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::preprocess::GeometrySpec;
use crate::raster::{excess_green, Mask};

pub const PLANT_RGB: [u8; 3] = [70, 150, 60];
pub const SOIL_RGB: [u8; 3] = [150, 105, 85];
pub const COLOR_NOISE: i32 = 8;

/// Plant pixels have ExG >= 138 and soil pixels ExG <= 7 under the palette and
/// noise above.
pub const PLANT_EXG_THRESHOLD: f64 = 64.0;

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub label: Mask,
}

fn jitter(rng: &mut impl Rng, base: [u8; 3]) -> Rgb<u8> {
    let mut px = [0u8; 3];
    for (out, b) in px.iter_mut().zip(base) {
        *out = (b as i32 + rng.random_range(-COLOR_NOISE..=COLOR_NOISE)).clamp(0, 255) as u8;
    }
    Rgb(px)
}

/// Paints `label` onto a fresh image using the plant and soil palettes.
pub fn render(label: &Mask, rng: &mut impl Rng) -> RgbImage {
    RgbImage::from_fn(label.width() as u32, label.height() as u32, |x, y| {
        if label.get(y as usize, x as usize) {
            jitter(rng, PLANT_RGB)
        } else {
            jitter(rng, SOIL_RGB)
        }
    })
}

/// Whether a pixel reads as plant under the synthetic palette.
#[inline]
pub fn is_plant_pixel(px: &Rgb<u8>) -> bool {
    excess_green(px) > PLANT_EXG_THRESHOLD
}

/// One or two axis-aligned plant rectangles covering roughly half the image.
///
/// Two plants are separated by a gap of at least three patches so they never
/// merge into one token component.
pub fn rect_scene(height: usize, width: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = Mask::new(height, width);
    let gap = 3 * crate::preprocess::PATCH;
    if rng.random_bool(0.5) || width < 4 * gap {
        let ph = (height as f64 * rng.random_range(0.62..0.78)) as usize;
        let pw = (width as f64 * rng.random_range(0.62..0.78)) as usize;
        let y0 = rng.random_range(0..=height - ph);
        let x0 = rng.random_range(0..=width - pw);
        label.fill_rect(y0, x0, y0 + ph - 1, x0 + pw - 1);
    } else {
        let half = (width - gap) / 2;
        for side in 0..2 {
            let ph = (height as f64 * rng.random_range(0.75..0.9)) as usize;
            let pw = (half as f64 * rng.random_range(0.7..0.85)) as usize;
            let y0 = rng.random_range(0..=height - ph);
            let lo = side * (half + gap);
            let x0 = lo + rng.random_range(0..=half - pw);
            label.fill_rect(y0, x0, y0 + ph - 1, x0 + pw - 1);
        }
    }
    let image = render(&label, &mut rng);
    Scene { image, label }
}

/// Soil only.
pub fn background_scene(height: usize, width: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = Mask::new(height, width);
    let image = render(&label, &mut rng);
    Scene { image, label }
}

/// A handful of filled ellipses ("rosettes") on soil.
pub fn blob_scene(height: usize, width: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let short = height.min(width) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.2..0.8) * height as f64,
                rng.random_range(0.2..0.8) * width as f64,
                rng.random_range(0.12..0.3) * short,
                rng.random_range(0.12..0.3) * short,
            )
        })
        .collect();
    let label = Mask::from_fn(height, width, |y, x| {
        blobs.iter().any(|&(cy, cx, ry, rx)| {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            dy * dy + dx * dx <= 1.0
        })
    });
    let image = render(&label, &mut rng);
    Scene { image, label }
}

/// Token-level ground truth: a content token is plant when at least half of
/// its content pixels are plant. `label` is at resized resolution.
pub fn token_labels(label: &Mask, spec: &GeometrySpec) -> Mask {
    let p = spec.patch;
    Mask::from_fn(spec.token_rows, spec.token_cols, |r, c| {
        if spec.is_pad_token(r, c) {
            return false;
        }
        let ys = r * p..((r + 1) * p).min(spec.resized_h);
        let xs = c * p..((c + 1) * p).min(spec.resized_w);
        let total = ys.len() * xs.len();
        let plant = ys
            .flat_map(|y| xs.clone().map(move |x| (y, x)))
            .filter(|&(y, x)| label.get(y, x))
            .count();
        2 * plant >= total
    })
}
