//! Supervised U-Net baseline and the training-set-size scaling experiment.

pub mod nn;
mod train;
mod unet;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use train::{
    prepare, train, Adam, EarlyStopping, EpochLog, PreparedSample, StopDecision, TrainConfig, TrainLog, UnetModel,
};
pub use unet::{bce_with_logits, Tape, Unet, UnetConfig};

use crate::error::{Error, Result};
use crate::eval::{iou, mean_std, Predictor, Sample};

pub const DESK_SIZES: [usize; 6] = [2, 4, 8, 16, 32, 64];
pub const DESK_REPETITIONS: usize = 5;
pub const PAPER_REPETITIONS: usize = 100;

/// Seed for the subset drawn for `(dataset, size, seed)`.
pub fn subset_seed(dataset: &str, size: usize, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(dataset.as_bytes());
    h.update([0]);
    h.update((size as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Uniform sample of `size` distinct indices below `available`, in draw order.
pub fn choose_subset(dataset: &str, available: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 || size > available {
        return Err(Error::invalid(format!(
            "subset of {size} requested from {available} training records"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subset_seed(dataset, size, seed));
    Ok(rand::seq::index::sample(&mut rng, available, size).into_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub dataset: String,
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    /// Repetition `r` uses seed `base_seed + r`.
    pub base_seed: u64,
    pub arch: UnetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub subset_size: usize,
    pub repetition: usize,
    pub seed: u64,
    pub subset: Vec<usize>,
    pub mean_iou: Option<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub error: Option<String>,
}

/// Aggregate over the successful runs of one subset size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub subset_size: usize,
    pub repetitions: usize,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub ious: Vec<f64>,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub zero_shot_mean: f64,
    pub size: Option<usize>,
}

impl fmt::Display for Crossover {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.size {
            Some(s) => write!(f, "{s} samples (zero-shot mean {:.3})", self.zero_shot_mean),
            None => write!(f, "none within tested sizes (zero-shot mean {:.3})", self.zero_shot_mean),
        }
    }
}

/// Smallest size whose mean IoU exceeds `zero_shot_mean`.
pub fn crossover(points: &[CurvePoint], zero_shot_mean: f64) -> Crossover {
    let size = points
        .iter()
        .filter(|p| p.repetitions > 0 && p.mean_iou > zero_shot_mean)
        .map(|p| p.subset_size)
        .min();
    Crossover { zero_shot_mean, size }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: ScalingConfig,
    pub runs: Vec<RunResult>,
    pub points: Vec<CurvePoint>,
    pub crossover: Option<Crossover>,
}

/// Mean validation IoU of `model` over `samples`.
pub fn mean_iou(model: &mut dyn Predictor, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no evaluation samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += iou(&model.predict(&s.image)?, &s.gt)?.value;
    }
    Ok(total / samples.len() as f64)
}

/// Prepares samples for a network with `arch`, in parallel.
pub fn prepare_all(samples: &[Sample], arch: UnetConfig, short_edge_cap: usize) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| prepare(&s.image, &s.gt, short_edge_cap, arch.multiple()))
        .collect()
}

/// Trains `repetitions` seeded U-Nets per subset size and scores each on
/// `val`, which also drives early stopping.
pub fn scaling_experiment(
    config: &ScalingConfig,
    train_pool: &[Sample],
    val: &[Sample],
    zero_shot_mean: Option<f64>,
) -> Result<ScalingReport> {
    scaling_experiment_lazy(config, train_pool.len(), &|i| Ok(train_pool[i].clone()), val, zero_shot_mean)
}

/// As [`scaling_experiment`], loading training images on demand. Only the
/// union of the drawn subsets is read.
pub fn scaling_experiment_lazy(
    config: &ScalingConfig,
    pool_len: usize,
    load_train: &(dyn Fn(usize) -> Result<Sample> + Sync),
    val: &[Sample],
    zero_shot_mean: Option<f64>,
) -> Result<ScalingReport> {
    if config.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("subset sizes must be strictly ascending"));
    }
    if config.repetitions == 0 {
        return Err(Error::invalid("at least one repetition is required"));
    }
    let mut needed = BTreeSet::new();
    for &size in &config.sizes {
        for r in 0..config.repetitions {
            needed.extend(choose_subset(&config.dataset, pool_len, size, config.base_seed + r as u64)?);
        }
    }
    let needed: Vec<usize> = needed.into_iter().collect();
    let prepared: Vec<PreparedSample> = needed
        .par_iter()
        .map(|&i| {
            let s = load_train(i)?;
            prepare(&s.image, &s.gt, config.train.short_edge_cap, config.arch.multiple())
        })
        .collect::<Result<_>>()?;
    let pool: BTreeMap<usize, PreparedSample> = needed.into_iter().zip(prepared).collect();
    let val_prepared = prepare_all(val, config.arch, config.train.short_edge_cap)?;

    let jobs: Vec<(usize, usize)> = config
        .sizes
        .iter()
        .flat_map(|&s| (0..config.repetitions).map(move |r| (s, r)))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(size, repetition)| {
            let seed = config.base_seed + repetition as u64;
            let subset = choose_subset(&config.dataset, pool_len, size, seed)?;
            let chosen: Vec<PreparedSample> = subset.iter().map(|&i| pool[&i].clone()).collect();
            let train_cfg = TrainConfig {
                seed: subset_seed(&config.dataset, size, seed),
                ..config.train
            };
            let outcome = train(config.arch, &train_cfg, &chosen, &val_prepared)
                .and_then(|(mut model, log)| Ok((mean_iou(&mut model, val)?, log)));
            Ok(match outcome {
                Ok((m, log)) => RunResult {
                    subset_size: size,
                    repetition,
                    seed,
                    subset,
                    mean_iou: Some(m),
                    epochs: log.epochs.len(),
                    best_epoch: log.best_epoch,
                    error: None,
                },
                Err(e) => {
                    log::warn!("run size={size} rep={repetition} failed: {e}");
                    RunResult {
                        subset_size: size,
                        repetition,
                        seed,
                        subset,
                        mean_iou: None,
                        epochs: 0,
                        best_epoch: 0,
                        error: Some(e.to_string()),
                    }
                }
            })
        })
        .collect::<Result<_>>()?;

    let points = curve_points(&config.sizes, &runs);
    Ok(ScalingReport {
        config: config.clone(),
        crossover: zero_shot_mean.map(|z| crossover(&points, z)),
        runs,
        points,
    })
}

/// Groups run results by size; failed runs are only counted.
pub fn curve_points(sizes: &[usize], runs: &[RunResult]) -> Vec<CurvePoint> {
    sizes
        .iter()
        .map(|&size| {
            let of_size: Vec<&RunResult> = runs.iter().filter(|r| r.subset_size == size).collect();
            let ious: Vec<f64> = of_size.iter().filter_map(|r| r.mean_iou).collect();
            let (mean_iou, std_iou) = if ious.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&ious) };
            CurvePoint {
                subset_size: size,
                repetitions: ious.len(),
                mean_iou,
                std_iou,
                failed: of_size.len() - ious.len(),
                ious,
            }
        })
        .collect()
}

/// `subset_size,repetitions,mean_iou,std_iou,failed,ious` with per-run IoUs
/// joined by `;`.
pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subset_size", "repetitions", "mean_iou", "std_iou", "failed", "ious"])?;
    for p in points {
        let ious: Vec<String> = p.ious.iter().map(|v| format!("{v:.6}")).collect();
        w.write_record([
            p.subset_size.to_string(),
            p.repetitions.to_string(),
            format!("{:.6}", p.mean_iou),
            format!("{:.6}", p.std_iou),
            p.failed.to_string(),
            ious.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
