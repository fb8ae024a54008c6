use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nn::Tensor;
use super::unet::{bce_with_logits, Unet, UnetConfig};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::preprocess::{apply_geometry, plan_geometry_capped, restore_mask, GeometrySpec, MAX_SHORT_EDGE};
use crate::raster::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Cap on the shortest image edge fed to the network.
    pub short_edge_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            short_edge_cap: MAX_SHORT_EDGE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("batch size, epochs and learning rate must be positive"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} must be below max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Feeds the loss of `epoch`. Non-finite losses never count as improvement.
    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let better = loss.is_finite() && self.best.is_none_or(|(_, b)| loss < b);
        if better {
            self.best = Some((epoch, loss));
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// True when no validation split was given and training loss was monitored.
    pub monitored_train_loss: bool,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Network-ready image with its target, padded to the network multiple.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: Tensor,
    /// 0/1 per pixel of `input`.
    pub target: Vec<f32>,
    /// Pixels inside the resized image content.
    pub valid: Vec<bool>,
    pub spec: GeometrySpec,
}

impl PreparedSample {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn to_input(image: &RgbImage, spec: &GeometrySpec, multiple: usize) -> Result<Tensor> {
    let padded = apply_geometry(image, spec)?;
    let (ph, pw) = spec.padded_dims();
    let (h, w) = (ph.div_ceil(multiple) * multiple, pw.div_ceil(multiple) * multiple);
    let mut t = Tensor::zeros(3, h, w);
    t.data.fill(-1.0);
    for (x, y, px) in padded.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            t.data[c * h * w + y * w + x] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(t)
}

/// Resizes and pads `image` (and `gt`, by nearest neighbor) for the network.
pub fn prepare(image: &RgbImage, gt: &Mask, short_edge_cap: usize, multiple: usize) -> Result<PreparedSample> {
    let dims = (image.height() as usize, image.width() as usize);
    if gt.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: gt.dims(),
        });
    }
    let spec = plan_geometry_capped(dims.0, dims.1, short_edge_cap)?;
    let input = to_input(image, &spec, multiple)?;
    let (h, w) = (input.h, input.w);
    let src = |i: usize, out: usize, orig: usize| (((2 * i + 1) * orig) / (2 * out)).min(orig - 1);
    let mut target = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..spec.resized_h {
        let sy = src(y, spec.resized_h, spec.orig_h);
        for x in 0..spec.resized_w {
            let sx = src(x, spec.resized_w, spec.orig_w);
            valid[y * w + x] = true;
            target[y * w + x] = gt.get(sy, sx) as u8 as f32;
        }
    }
    Ok(PreparedSample {
        input,
        target,
        valid,
        spec,
    })
}

/// A trained network with its preprocessing settings.
#[derive(Debug, Clone)]
pub struct UnetModel {
    net: Unet,
    params: Vec<f32>,
    short_edge_cap: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: UnetConfig,
    short_edge_cap: usize,
    params: usize,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PSUN";
const CHECKPOINT_VERSION: u32 = 1;

impl UnetModel {
    pub fn new(config: UnetConfig, params: Vec<f32>, short_edge_cap: usize) -> Result<Self> {
        let net = Unet::new(config)?;
        if params.len() != net.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                net.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            net,
            params,
            short_edge_cap,
        })
    }

    pub fn config(&self) -> UnetConfig {
        self.net.config()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn short_edge_cap(&self) -> usize {
        self.short_edge_cap
    }

    /// Per-pixel logits over the whole padded network input.
    pub fn logits(&self, image: &RgbImage) -> Result<(Tensor, GeometrySpec)> {
        let dims = (image.height() as usize, image.width() as usize);
        let spec = plan_geometry_capped(dims.0, dims.1, self.short_edge_cap)?;
        let input = to_input(image, &spec, self.net.config().multiple())?;
        Ok((self.net.infer(&self.params, input)?, spec))
    }

    /// Mean per-pixel loss of a prepared sample (sum, count).
    pub fn loss(&self, sample: &PreparedSample) -> Result<(f64, usize)> {
        let z = self.net.infer(&self.params, sample.input.clone())?;
        Ok((bce_with_logits(&z, &sample.target, &sample.valid).0, sample.valid_count()))
    }

    /// `b"PSUN" | version u32 | header_len u32 | JSON header | f32 LE params`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec_pretty(&CheckpointHeader {
            config: self.net.config(),
            short_edge_cap: self.short_edge_cap,
            params: self.params.len(),
        })?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for v in &self.params {
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
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a U-Net checkpoint"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != CHECKPOINT_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
        let payload = &body[header_len..];
        if payload.len() != header.params * 4 {
            return Err(bad("payload size does not match header"));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.config, params, header.short_edge_cap)
    }
}

impl Predictor for UnetModel {
    fn predict(&mut self, image: &RgbImage) -> Result<Mask> {
        let (z, spec) = self.logits(image)?;
        let (ph, pw) = spec.padded_dims();
        let padded = Mask::from_fn(ph, pw, |y, x| z.data[y * z.w + x] >= 0.0);
        restore_mask(&padded, &spec)
    }
}

/// Summed loss and valid-pixel count over `samples`, accumulated in order.
fn total_loss(net: &Unet, params: &[f32], samples: &[PreparedSample]) -> Result<(f64, usize)> {
    let parts = samples
        .par_iter()
        .map(|s| {
            let z = net.infer(params, s.input.clone())?;
            Ok((bce_with_logits(&z, &s.target, &s.valid).0, s.valid_count()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().fold((0.0, 0), |(l, n), (a, b)| (l + a, n + b)))
}

/// Trains a U-Net from scratch with Adam on per-pixel BCE, stopping after
/// `patience` epochs without validation improvement and returning the best
/// weights. With an empty `val`, training loss is monitored instead.
pub fn train(
    arch: UnetConfig,
    config: &TrainConfig,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
) -> Result<(UnetModel, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let m = arch.multiple();
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.input.h % m != 0 || s.input.w % m != 0) {
        return Err(Error::invalid(format!(
            "sample of {}x{} is not prepared for a {}-level network",
            s.input.h, s.input.w, arch.levels
        )));
    }
    let net = Unet::new(arch)?;
    let mut params = net.init_params(config.seed);
    let mut best_params = params.clone();
    let mut adam = Adam::new(params.len(), config);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog {
        monitored_train_loss: val_set.is_empty(),
        ..TrainLog::default()
    };

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let parts = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let (z, tape) = net.forward(&params, s.input.clone())?;
                    let (loss, dz) = bce_with_logits(&z, &s.target, &s.valid);
                    let mut g = vec![0.0f32; params.len()];
                    net.backward(&params, &tape, &dz, &mut g);
                    Ok((g, loss, s.valid_count()))
                })
                .collect::<Result<Vec<_>>>()?;
            let count: usize = parts.iter().map(|p| p.2).sum();
            if count == 0 {
                continue;
            }
            let mut grads = vec![0.0f32; params.len()];
            for (g, loss, _) in &parts {
                grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                epoch_loss += loss;
            }
            epoch_count += count;
            let scale = 1.0 / count as f32;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut params, &grads);
        }
        let train_loss = epoch_loss / epoch_count.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::invalid(format!("training diverged at epoch {epoch}")));
        }
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            let (l, n) = total_loss(&net, &params, val_set)?;
            l / n.max(1) as f64
        };
        let decision = stopper.update(epoch, val_loss);
        if decision == StopDecision::Improved {
            best_params.clone_from(&params);
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            improved: decision == StopDecision::Improved,
        });
        if decision == StopDecision::Stop {
            log.stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_loss) = stopper.best().unwrap_or((0, f64::NAN));
    log.best_epoch = best_epoch;
    log.best_val_loss = best_loss;
    Ok((UnetModel::new(arch, best_params, config.short_edge_cap)?, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_counts_epochs_since_best() {
        let mut s = EarlyStopping::new(3);
        let losses = [1.0, 0.8, 0.9, 0.85, 0.7, 0.71, 0.72, 0.73];
        let decisions: Vec<_> = losses.iter().enumerate().map(|(i, &l)| s.update(i + 1, l)).collect();
        use StopDecision::*;
        assert_eq!(decisions, vec![Improved, Improved, Continue, Continue, Improved, Continue, Continue, Stop]);
        assert_eq!(s.best(), Some((5, 0.7)));
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.update(1, 0.5), StopDecision::Improved);
        assert_eq!(s.update(2, 0.5), StopDecision::Stop);
    }

    #[test]
    fn nan_loss_never_improves() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.update(1, f64::NAN), StopDecision::Continue);
        assert_eq!(s.update(2, 1.0), StopDecision::Improved);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(2, &cfg);
        let mut p = vec![1.0f32, -1.0];
        adam.step(&mut p, &[0.5, -3.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn prepare_marks_content_pixels() {
        let img = RgbImage::new(30, 20);
        let gt = Mask::from_fn(20, 30, |_, x| x < 10);
        let s = prepare(&img, &gt, MAX_SHORT_EDGE, 8).unwrap();
        assert_eq!((s.input.h, s.input.w), (32, 48));
        assert_eq!(s.valid_count(), 600);
        assert_eq!(s.target.iter().sum::<f32>(), 200.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = UnetConfig { levels: 2, width: 2 };
        let net = Unet::new(cfg).unwrap();
        let model = UnetModel::new(cfg, net.init_params(5), 518).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.unet");
        model.save(&path).unwrap();
        let back = UnetModel::load(&path).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.short_edge_cap(), 518);
        std::fs::write(&path, b"PSPC").unwrap();
        assert!(UnetModel::load(&path).is_err());
    }
}
