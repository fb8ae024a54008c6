//! Token classification by the first principal component.
//!
//! A [`PcaModel`] is fit over every content token of a reference split, its
//! leading component is oriented so plant tokens score high, and each token
//! is then labelled plant when its oriented score is `>= 0`.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::preprocess::GeometrySpec;
use crate::raster::{excess_green, Mask};

/// Default cap on the number of tokens the covariance is estimated from.
pub const DEFAULT_TOKEN_CAP: usize = 2_000_000;

/// Components kept on a fit: one classifies, three are enough for RGB views.
pub const RETAINED_COMPONENTS: usize = 3;

/// Correlations weaker than this leave the orientation at `+1`.
pub const MIN_ORIENTATION_CORRELATION: f64 = 0.05;

const GRIDS_PER_BLOCK: usize = 4;
const GRAM_ROWS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OrientationSource {
    /// Not oriented yet.
    Unset,
    /// Sign chosen from the score / excess-green correlation.
    ExcessGreen { correlation: f64 },
    /// Correlation too weak to decide; left at `+1`.
    Weak { correlation: f64 },
    /// Set or flipped by hand.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub encoder_id: String,
    /// Tokens the covariance was estimated from.
    pub token_count: usize,
    /// Content tokens available before subsampling.
    pub total_tokens: usize,
    pub subsample_seed: u64,
    pub token_cap: usize,
    #[serde(default)]
    pub fit_split: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit-norm, pairwise orthogonal, ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// `+1` or `-1`, applied to the first component's scores.
    pub orientation: f64,
    pub orientation_source: OrientationSource,
    pub fit_meta: FitMeta,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub token_cap: usize,
    pub seed: u64,
    pub components: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            token_cap: DEFAULT_TOKEN_CAP,
            seed: 0,
            components: RETAINED_COMPONENTS,
        }
    }
}

/// Random access to the grids a model is fit on. Lets large splits stream
/// from the feature cache instead of living in memory.
pub trait GridSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn grid(&self, index: usize) -> Result<Cow<'_, TokenGrid>>;
}

impl GridSource for &[TokenGrid] {
    fn len(&self) -> usize {
        <[TokenGrid]>::len(self)
    }

    fn grid(&self, index: usize) -> Result<Cow<'_, TokenGrid>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl GridSource for Vec<TokenGrid> {
    fn len(&self) -> usize {
        <[TokenGrid]>::len(self)
    }

    fn grid(&self, index: usize) -> Result<Cow<'_, TokenGrid>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// Fits an in-memory collection of grids.
pub fn fit(grids: &[TokenGrid], options: &FitOptions) -> Result<PcaModel> {
    fit_source(&grids, options)
}

/// Centered PCA over all content tokens of `source`.
///
/// When more than `token_cap` content tokens exist, a uniform subsample of
/// exactly `token_cap` tokens drawn with `seed` is used. Partial sums run in
/// parallel over fixed blocks of grids and are combined in block order, so the
/// result does not depend on the thread count.
pub fn fit_source(source: &dyn GridSource, options: &FitOptions) -> Result<PcaModel> {
    let n_grids = source.len();
    let mut encoder_id: Option<String> = None;
    let mut dim = 0;
    let mut offsets = Vec::with_capacity(n_grids + 1);
    offsets.push(0usize);
    for i in 0..n_grids {
        let g = source.grid(i)?;
        match &encoder_id {
            None => {
                encoder_id = Some(g.encoder_id().to_string());
                dim = g.dim();
            }
            Some(id) if id != g.encoder_id() => {
                return Err(Error::EncoderMismatch {
                    expected: id.clone(),
                    found: g.encoder_id().to_string(),
                })
            }
            Some(_) if g.dim() != dim => {
                return Err(Error::invalid(format!(
                    "grid {i} has feature width {}, expected {dim}",
                    g.dim()
                )))
            }
            Some(_) => {}
        }
        offsets.push(offsets[i] + g.content_token_count());
    }
    let total = offsets[n_grids];
    if total < 2 {
        return Err(Error::InsufficientTokens {
            needed: 2,
            found: total,
        });
    }
    let encoder_id = encoder_id.expect("at least one grid");

    // keep[g] lists the selected content-token ordinals of grid g
    let selection: Option<Vec<Vec<usize>>> = (total > options.token_cap).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut picked = rand::seq::index::sample(&mut rng, total, options.token_cap).into_vec();
        picked.sort_unstable();
        let mut keep = vec![Vec::new(); n_grids];
        let mut g = 0;
        for idx in picked {
            while idx >= offsets[g + 1] {
                g += 1;
            }
            keep[g].push(idx - offsets[g]);
        }
        keep
    });
    let used = selection.as_ref().map_or(total, |_| options.token_cap);

    let blocks: Vec<std::ops::Range<usize>> = (0..n_grids)
        .step_by(GRIDS_PER_BLOCK)
        .map(|s| s..(s + GRIDS_PER_BLOCK).min(n_grids))
        .collect();
    let wave = rayon::current_num_threads().max(1);

    let for_tokens = |range: std::ops::Range<usize>, f: &mut dyn FnMut(&[f32])| -> Result<()> {
        for gi in range {
            let grid = source.grid(gi)?;
            match &selection {
                None => grid.content_tokens().for_each(&mut *f),
                Some(keep) => {
                    let wanted = &keep[gi];
                    let mut next = 0;
                    for (ordinal, tok) in grid.content_tokens().enumerate() {
                        if next < wanted.len() && wanted[next] == ordinal {
                            f(tok);
                            next += 1;
                        }
                    }
                }
            }
        }
        Ok(())
    };

    // pass 1: mean and mean square magnitude
    let mut sum = vec![0.0f64; dim];
    let mut sum_sq = 0.0f64;
    for chunk in blocks.chunks(wave) {
        let partials: Vec<Result<(Vec<f64>, f64)>> = chunk
            .par_iter()
            .map(|range| {
                let mut s = vec![0.0f64; dim];
                let mut sq = 0.0f64;
                for_tokens(range.clone(), &mut |tok| {
                    for (acc, &v) in s.iter_mut().zip(tok) {
                        let v = v as f64;
                        *acc += v;
                        sq += v * v;
                    }
                })?;
                Ok((s, sq))
            })
            .collect();
        for p in partials {
            let (s, sq) = p?;
            sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            sum_sq += sq;
        }
    }
    let n = used as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mean_square = sum_sq / (n * dim as f64);

    // pass 2: scatter matrix of centered tokens
    let mut scatter = vec![0.0f64; dim * dim];
    for chunk in blocks.chunks(wave) {
        let partials: Vec<Result<Vec<f64>>> = chunk
            .par_iter()
            .map(|range| {
                let mut acc = vec![0.0f64; dim * dim];
                let mut rows = Vec::with_capacity(GRAM_ROWS * dim);
                for_tokens(range.clone(), &mut |tok| {
                    rows.extend(tok.iter().zip(&mean).map(|(&v, m)| v as f64 - m));
                    if rows.len() == GRAM_ROWS * dim {
                        accumulate_gram(&mut acc, &rows, dim);
                        rows.clear();
                    }
                })?;
                if !rows.is_empty() {
                    accumulate_gram(&mut acc, &rows, dim);
                }
                Ok(acc)
            })
            .collect();
        for p in partials {
            scatter.iter_mut().zip(&p?).for_each(|(a, b)| *a += b);
        }
    }

    let cov = DMatrix::from_fn(dim, dim, |i, j| {
        // symmetrize away rounding asymmetry
        0.5 * (scatter[i * dim + j] + scatter[j * dim + i]) / n
    });
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let leading = eig.eigenvalues[order[0]];
    if leading <= 1e-12 * mean_square {
        return Err(Error::RankDeficient { variance: leading });
    }

    let k = options.components.clamp(1, dim);
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in &order[..k] {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        // canonical sign: largest-magnitude loading positive
        let pivot = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        orientation: 1.0,
        orientation_source: OrientationSource::Unset,
        fit_meta: FitMeta {
            encoder_id,
            token_count: used,
            total_tokens: total,
            subsample_seed: options.seed,
            token_cap: options.token_cap,
            fit_split: None,
        },
    })
}

/// `acc += rowsᵀ · rows` for a row-major `r x dim` block.
fn accumulate_gram(acc: &mut [f64], rows: &[f64], dim: usize) {
    let r = rows.len() / dim;
    unsafe {
        matrixmultiply::dgemm(
            dim,
            r,
            dim,
            1.0,
            rows.as_ptr(),
            1,
            dim as isize,
            rows.as_ptr(),
            dim as isize,
            1,
            1.0,
            acc.as_mut_ptr(),
            dim as isize,
            1,
        );
    }
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn leading(&self) -> &[f64] {
        &self.components[0]
    }

    /// Projection onto the first component, before orientation.
    #[inline]
    pub fn raw_score(&self, token: &[f32]) -> f64 {
        token
            .iter()
            .zip(&self.mean)
            .zip(&self.components[0])
            .map(|((&v, m), c)| (v as f64 - m) * c)
            .sum()
    }

    /// Oriented first-component score.
    #[inline]
    pub fn score(&self, token: &[f32]) -> f64 {
        self.orientation * self.raw_score(token)
    }

    /// Projection onto each retained component, before orientation.
    pub fn project(&self, token: &[f32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                token
                    .iter()
                    .zip(&self.mean)
                    .zip(c)
                    .map(|((&v, m), w)| (v as f64 - m) * w)
                    .sum()
            })
            .collect()
    }

    /// Copy with the first component negated.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.components[0].iter_mut().for_each(|x| *x = -*x);
        out
    }

    /// Sets the orientation by hand.
    pub fn with_orientation(mut self, sign: f64) -> Self {
        self.orientation = if sign < 0.0 { -1.0 } else { 1.0 };
        self.orientation_source = OrientationSource::Manual;
        self
    }

    /// Largest deviation from orthonormality over all component pairs.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Streaming estimate of the correlation between raw first-component scores
/// and per-token mean excess green.
#[derive(Debug, Default, Clone)]
pub struct OrientationStats {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl OrientationStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every content token of `grid`, with `image` the matching padded image.
    pub fn add(&mut self, model: &PcaModel, grid: &TokenGrid, image: &RgbImage) -> Result<()> {
        let spec = grid.spec();
        if (image.height() as usize, image.width() as usize) != spec.padded_dims() {
            return Err(Error::DimensionMismatch {
                expected: spec.padded_dims(),
                found: (image.height() as usize, image.width() as usize),
            });
        }
        let exg = token_excess_green(image, spec);
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                if grid.is_pad(r, c) {
                    continue;
                }
                let x = model.raw_score(grid.token(r, c));
                let y = exg[r * grid.cols() + c];
                self.n += 1.0;
                self.sx += x;
                self.sy += y;
                self.sxx += x * x;
                self.syy += y * y;
                self.sxy += x * y;
            }
        }
        Ok(())
    }

    /// Pearson correlation; 0 when either side has no variance.
    pub fn correlation(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        let cov = self.sxy - self.sx * self.sy / self.n;
        let vx = self.sxx - self.sx * self.sx / self.n;
        let vy = self.syy - self.sy * self.sy / self.n;
        if vx <= 0.0 || vy <= 0.0 {
            return 0.0;
        }
        (cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0)
    }

    /// Orients `model` from the accumulated statistics; `flip` negates the
    /// outcome and marks it manual.
    pub fn orient(&self, model: &PcaModel, flip: bool) -> PcaModel {
        let mut out = model.clone();
        let correlation = self.correlation();
        if correlation.abs() < MIN_ORIENTATION_CORRELATION {
            log::warn!(
                "first component barely correlates with excess green (r = {correlation:.3}); \
                 keeping orientation +1, pass a manual flip if plants come out negative"
            );
            out.orientation = 1.0;
            out.orientation_source = OrientationSource::Weak { correlation };
        } else {
            out.orientation = correlation.signum();
            out.orientation_source = OrientationSource::ExcessGreen { correlation };
        }
        if flip {
            out.orientation = -out.orientation;
            out.orientation_source = OrientationSource::Manual;
        }
        out
    }
}

/// Orients `model` so that oriented scores correlate nonnegatively with the
/// mean excess green of each token's pixel block.
pub fn orient(model: &PcaModel, grids: &[TokenGrid], images: &[RgbImage], flip: bool) -> Result<PcaModel> {
    if grids.len() != images.len() {
        return Err(Error::invalid(format!(
            "{} grids but {} images",
            grids.len(),
            images.len()
        )));
    }
    let mut stats = OrientationStats::new();
    for (g, img) in grids.iter().zip(images) {
        stats.add(model, g, img)?;
    }
    Ok(stats.orient(model, flip))
}

/// Mean excess green over the content pixels of every token block.
pub fn token_excess_green(image: &RgbImage, spec: &GeometrySpec) -> Vec<f64> {
    let mut sums = vec![0.0f64; spec.token_rows * spec.token_cols];
    let mut counts = vec![0usize; sums.len()];
    for y in 0..spec.resized_h {
        for x in 0..spec.resized_w {
            let t = (y / spec.patch) * spec.token_cols + x / spec.patch;
            sums[t] += excess_green(image.get_pixel(x as u32, y as u32));
            counts[t] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Per-token plant/background decision.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    pub values: Mask,
    /// Oriented first-component scores, row-major.
    pub scores: Vec<f64>,
    pub spec: GeometrySpec,
}

impl TokenMask {
    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.spec.token_cols + col]
    }

    /// Scores of tokens that touch image content.
    pub fn content_scores(&self) -> impl Iterator<Item = f64> + '_ {
        let cols = self.spec.token_cols;
        self.scores
            .iter()
            .enumerate()
            .filter(move |(i, _)| !self.spec.is_pad_token(i / cols, i % cols))
            .map(|(_, &s)| s)
    }
}

/// Labels each token plant when its oriented score is `>= threshold`. Padding
/// tokens are always background.
pub fn classify(grid: &TokenGrid, model: &PcaModel, threshold: f64) -> Result<TokenMask> {
    if grid.encoder_id() != model.fit_meta.encoder_id {
        return Err(Error::EncoderMismatch {
            expected: model.fit_meta.encoder_id.clone(),
            found: grid.encoder_id().to_string(),
        });
    }
    if grid.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "grid feature width {} does not match model width {}",
            grid.dim(),
            model.dim()
        )));
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut scores = Vec::with_capacity(rows * cols);
    let mut values = Mask::new(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let s = model.score(grid.token(r, c));
            scores.push(s);
            values.set(r, c, !grid.is_pad(r, c) && s >= threshold);
        }
    }
    Ok(TokenMask {
        values,
        scores,
        spec: *grid.spec(),
    })
}

/// Histogram of first-component scores with edges symmetric around zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Bins the content-token scores of `masks` over `[-m, m]`, `m` being the
/// largest absolute score (1 when every score is 0). The last bin is closed.
pub fn score_histogram<'a>(masks: impl IntoIterator<Item = &'a TokenMask>, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let scores: Vec<f64> = masks.into_iter().flat_map(|m| m.content_scores()).collect();
    if scores.is_empty() {
        return Err(Error::invalid("no scores to histogram"));
    }
    let mut half = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if half == 0.0 {
        half = 1.0;
    }
    let edges: Vec<f64> = (0..=bins)
        .map(|i| -half + 2.0 * half * i as f64 / bins as f64)
        .collect();
    let mut counts = vec![0u64; bins];
    for s in scores {
        let idx = (((s + half) / (2.0 * half)) * bins as f64).floor() as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

const MODEL_MAGIC: &[u8; 4] = b"PSPC";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    dim: usize,
    components: usize,
    explained_variance: Vec<f64>,
    orientation: f64,
    orientation_source: OrientationSource,
    fit_meta: FitMeta,
}

impl PcaModel {
    /// Writes `b"PSPC" | version u32 | header_len u32 | JSON header | f64 LE
    /// payload`, the payload being the mean followed by each component.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec_pretty(&ModelHeader {
            dim: self.dim(),
            components: self.components.len(),
            explained_variance: self.explained_variance.clone(),
            orientation: self.orientation,
            orientation_source: self.orientation_source,
            fit_meta: self.fit_meta.clone(),
        })?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for v in self.mean.iter().chain(self.components.iter().flatten()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("not a PCA model file"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != MODEL_VERSION {
            return Err(bad("unsupported model version"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: ModelHeader = serde_json::from_slice(&body[..header_len])?;
        let payload = &body[header_len..];
        let expected = (1 + header.components) * header.dim;
        if header.components == 0 || payload.len() != expected * 8 {
            return Err(bad("payload size does not match header"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut chunks = values.chunks_exact(header.dim).map(<[f64]>::to_vec);
        let mean = chunks.next().unwrap();
        Ok(Self {
            mean,
            components: chunks.collect(),
            explained_variance: header.explained_variance,
            orientation: header.orientation,
            orientation_source: header.orientation_source,
            fit_meta: header.fit_meta,
        })
    }
}
