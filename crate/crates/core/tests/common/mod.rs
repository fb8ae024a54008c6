#![allow(dead_code)]

use image::RgbImage;
use plantseg::encoder::{extract, Encoder, SyntheticEncoder, TokenGrid};
use plantseg::preprocess::GeometrySpec;
use plantseg::pca::{self, FitOptions, PcaModel};
use plantseg::preprocess::{apply_geometry, plan_geometry};
use plantseg::synth::{rect_scene, Scene};

/// Scene sizes vary with the seed but stay large relative to a patch.
pub fn scene(seed: u64) -> Scene {
    let h = 560 + (seed as usize * 37) % 281;
    let w = 700 + (seed as usize * 53) % 301;
    rect_scene(h, w, seed)
}

pub fn grid_of(encoder: &mut SyntheticEncoder, image: &RgbImage) -> (TokenGrid, RgbImage) {
    let spec = plan_geometry(image.height() as usize, image.width() as usize).unwrap();
    let padded = apply_geometry(image, &spec).unwrap();
    let grid = extract(encoder, &padded, &spec).unwrap();
    (grid, padded)
}

/// Fits and orients a model on the scenes with the given seeds.
pub fn fit_on(seeds: impl IntoIterator<Item = u64>, encoder_seed: u64) -> PcaModel {
    let mut enc = SyntheticEncoder::new(encoder_seed);
    let (grids, images): (Vec<_>, Vec<_>) = seeds.into_iter().map(|s| grid_of(&mut enc, &scene(s).image)).unzip();
    let model = pca::fit(&grids, &FitOptions::default()).unwrap();
    pca::orient(&model, &grids, &images, false).unwrap()
}

/// Emits the synthetic cluster means without noise, so every token of a
/// background image lands exactly on the soil mean.
pub struct NoiselessEncoder;

impl Encoder for NoiselessEncoder {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn encode(&mut self, image: &RgbImage, spec: &GeometrySpec) -> plantseg::Result<TokenGrid> {
        let mut features = Vec::new();
        for r in 0..spec.token_rows {
            for c in 0..spec.token_cols {
                let (y, x) = ((r * spec.patch).min(spec.resized_h - 1), (c * spec.patch).min(spec.resized_w - 1));
                let plant = !spec.is_pad_token(r, c) && plantseg::synth::is_plant_pixel(image.get_pixel(x as u32, y as u32));
                features.extend(SyntheticEncoder::cluster_mean(plant));
            }
        }
        TokenGrid::new(features, plantseg::encoder::SYNTHETIC_DIM, *spec, "synthetic")
    }
}

/// Centered covariance (divided by n) by direct double loops.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in i..d {
                cov[i][j] += a * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

/// Cyclic Jacobi eigendecomposition; eigenpairs sorted by descending value.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|j| (a[j][j], (0..n).map(|i| v[i][j]).collect())).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

pub fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).abs()
}

/// Random anisotropic tokens: independent scales `3 * 0.8^j` on a random
/// orthonormal basis, so the leading eigenvalue is well separated.
pub fn anisotropic_tokens(rng: &mut impl rand::Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    (0..n)
        .map(|_| {
            let mut t = offset.clone();
            for (j, b) in basis.iter().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                let s = 3.0 * 0.8f64.powi(j as i32) * z;
                t.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
            }
            t.into_iter().map(|x| x as f32).collect()
        })
        .collect()
}

/// Content-only grid of `rows x cols` tokens.
pub fn grid_from_tokens(tokens: &[Vec<f32>], rows: usize, cols: usize, id: &str) -> TokenGrid {
    let spec = plan_geometry(rows * 14, cols * 14).unwrap();
    TokenGrid::new(tokens.concat(), tokens[0].len(), spec, id).unwrap()
}

/// Breadth-first flood fill; components as sorted cell lists.
pub fn flood_fill(mask: &plantseg::Mask, eight: bool) -> std::collections::BTreeSet<Vec<(usize, usize)>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = std::collections::BTreeSet::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sy, sx) || seen[sy * w + sx] {
                continue;
            }
            let mut cells = Vec::new();
            let mut queue = std::collections::VecDeque::from([(sy, sx)]);
            seen[sy * w + sx] = true;
            while let Some((y, x)) = queue.pop_front() {
                cells.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.get(ny, nx) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            cells.sort();
            out.insert(cells);
        }
    }
    out
}
