//! train-baseline, scaling-curve and cross-eval.

use std::path::Path;

use anyhow::{Context, Result};
use plantseg::baseline::{
    choose_subset, prepare_all, scaling_experiment_lazy, train, write_curve_csv, ScalingConfig, TrainConfig,
    UnetConfig, UnetModel, DESK_REPETITIONS, PAPER_REPETITIONS,
};
use plantseg::datasets::{ImageRecord, RecordSet};
use plantseg::eval::{aggregate, evaluate, format_cell, read_records, write_records, GroupBy, Predictor, Sample, SampleSource};
use plantseg::preprocess::{BASE_TRAIN_SIZE, MAX_SHORT_EDGE};
use plantseg::plot;
use rayon::prelude::*;
use serde_json::json;

use crate::args::{ArchArgs, CrossEvalArgs, ScalingCurveArgs, TrainArgs, TrainBaselineArgs};
use crate::context::{parse_split, Ctx, ResolvedDataset};
use crate::UsageError;

fn arch(args: &ArchArgs) -> Result<UnetConfig> {
    let c = UnetConfig {
        levels: args.levels,
        width: args.width,
    };
    c.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(c)
}

fn train_config(args: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let c = TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        max_epochs: args.max_epochs,
        patience: args.patience,
        seed,
        short_edge_cap: if args.fast { BASE_TRAIN_SIZE } else { MAX_SHORT_EDGE },
        ..TrainConfig::default()
    };
    c.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(c)
}

fn labelled(dataset: &ResolvedDataset, split: &str) -> Result<Vec<ImageRecord>> {
    parse_split(split)?;
    Ok(dataset
        .records(split)?
        .into_iter()
        .filter(|r| r.mask_path.is_some())
        .collect())
}

fn load_sample(rec: &ImageRecord) -> plantseg::Result<Sample> {
    let (image, gt) = rec.load_pair()?;
    Ok(Sample {
        id: rec.id.clone(),
        image,
        gt: gt.expect("filtered on mask presence"),
    })
}

fn load_samples(records: &[ImageRecord]) -> plantseg::Result<Vec<Sample>> {
    records.par_iter().map(load_sample).collect()
}

pub fn train_baseline(ctx: &Ctx, args: &TrainBaselineArgs) -> Result<()> {
    let mut manifest = ctx.manifest("train-baseline", args);
    let dataset = ctx.dataset(&args.data)?;
    let arch = arch(&args.arch)?;
    let config = train_config(&args.train, ctx.seed)?;
    manifest.dataset = Some(dataset.describe(&args.train.train_split));
    let pool = labelled(&dataset, &args.train.train_split)?;
    let subset: Vec<usize> = match args.subset_size {
        Some(n) => choose_subset(&dataset.name, pool.len(), n, ctx.seed)?,
        None => (0..pool.len()).collect(),
    };
    if subset.is_empty() {
        return Err(plantseg::Error::invalid("no labelled training images").into());
    }
    let chosen: Vec<ImageRecord> = subset.iter().map(|&i| pool[i].clone()).collect();
    let val_records = labelled(&dataset, &args.train.val_split)?;
    let train_samples = load_samples(&chosen)?;
    let val_samples = load_samples(&val_records)?;
    let train_set = prepare_all(&train_samples, arch, config.short_edge_cap)?;
    let val_set = prepare_all(&val_samples, arch, config.short_edge_cap)?;
    log::info!("training on {} images, validating on {}", train_set.len(), val_set.len());
    let (mut model, log) = train(arch, &config, &train_set, &val_set)?;

    std::fs::create_dir_all(&args.out)?;
    let cfg_path = args.out.join("config.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_vec_pretty(&json!({
            "dataset": dataset.name,
            "arch": arch,
            "train": config,
            "subset": subset,
            "subset_ids": chosen.iter().map(|r| &r.id).collect::<Vec<_>>(),
            "best_epoch": log.best_epoch,
            "best_val_loss": log.best_val_loss,
            "stopped_early": log.stopped_early,
            "monitored_train_loss": log.monitored_train_loss,
        }))?,
    )?;
    let epochs = args.out.join("epochs.csv");
    log.write_csv(&epochs)?;
    let ckpt = args.out.join("unet.bin");
    model.save(&ckpt)?;
    for p in [&cfg_path, &epochs, &ckpt] {
        manifest.output(p);
    }
    manifest.backend("unet", json!({"arch": arch, "params": model.params().len()}));
    println!(
        "{} epochs, best epoch {} (loss {:.4}) -> {}",
        log.epochs.len(),
        log.best_epoch,
        log.best_val_loss,
        ckpt.display()
    );
    if !val_samples.is_empty() {
        let set = plantseg::eval::InMemorySet {
            name: dataset.name.clone(),
            samples: val_samples,
        };
        let results = evaluate(&mut model, &set, "unet", ctx.seed)?;
        let eval_path = args.out.join("eval.csv");
        write_records(&eval_path, &results)?;
        manifest.output(&eval_path);
        for s in aggregate(&results, GroupBy::Dataset) {
            println!("{} val IoU {}", dataset.name, format_cell(s.mean, s.std));
        }
    }
    manifest.write(&args.out)?;
    Ok(())
}

fn zero_shot_mean(args: &ScalingCurveArgs, dataset: &str) -> Result<Option<f64>> {
    if let Some(m) = args.zero_shot_mean {
        return Ok(Some(m));
    }
    let Some(path) = &args.zero_shot else {
        return Ok(None);
    };
    let records = read_records(path)?;
    let records: Vec<_> = records
        .into_iter()
        .filter(|r| r.dataset == dataset && !r.mask_input_used)
        .filter(|r| args.zero_shot_method.as_ref().is_none_or(|m| &r.method == m))
        .collect();
    let stats = aggregate(&records, GroupBy::Method);
    match stats.as_slice() {
        [one] => Ok(Some(one.mean)),
        [] => Err(plantseg::Error::invalid(format!(
            "{} has no box-prompt results for dataset `{dataset}`",
            path.display()
        ))
        .into()),
        _ => Err(UsageError(format!(
            "{} holds several methods; choose one with --zero-shot-method",
            path.display()
        ))
        .into()),
    }
}

pub fn scaling_curve(ctx: &Ctx, args: &ScalingCurveArgs) -> Result<()> {
    if args.paper_scale && args.train.fast {
        return Err(UsageError("--fast is for desk runs and cannot be combined with --paper-scale".into()).into());
    }
    let repetitions = match (args.paper_scale, args.repetitions) {
        (true, Some(_)) => return Err(UsageError("--paper-scale fixes the repetitions at 100".into()).into()),
        (true, None) => PAPER_REPETITIONS,
        (false, r) => r.unwrap_or(DESK_REPETITIONS),
    };
    let mut manifest = ctx.manifest("scaling-curve", args);
    let dataset = ctx.dataset(&args.data)?;
    manifest.dataset = Some(dataset.describe(&args.train.train_split));
    let zero_shot = zero_shot_mean(args, &dataset.name)?;
    let config = ScalingConfig {
        dataset: dataset.name.clone(),
        sizes: args.sizes.clone(),
        repetitions,
        base_seed: ctx.seed,
        arch: arch(&args.arch)?,
        train: train_config(&args.train, ctx.seed)?,
    };
    let pool = labelled(&dataset, &args.train.train_split)?;
    let val = load_samples(&labelled(&dataset, &args.train.val_split)?)?;
    if val.is_empty() {
        return Err(plantseg::Error::invalid("the scaling curve is scored on labelled validation images; none found").into());
    }
    log::info!(
        "{} runs over sizes {:?}, {} training images available",
        config.sizes.len() * repetitions,
        config.sizes,
        pool.len()
    );
    let report = scaling_experiment_lazy(&config, pool.len(), &|i| load_sample(&pool[i]), &val, zero_shot)?;

    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("curve.csv");
    write_curve_csv(&csv_path, &report.points)?;
    let png = args.out.join("curve.png");
    plot::scaling_png(&report.points, zero_shot, &png)?;
    let runs = args.out.join("runs.json");
    std::fs::write(&runs, serde_json::to_vec_pretty(&report)?)?;
    for p in [&csv_path, &png, &runs] {
        manifest.output(p);
    }
    for p in &report.points {
        println!(
            "size {:>4}: {} ({} runs, {} failed)",
            p.subset_size,
            format_cell(p.mean_iou, p.std_iou),
            p.repetitions,
            p.failed
        );
    }
    if let Some(c) = &report.crossover {
        println!("crossover: {c}");
    }
    manifest.failures = report.runs.iter().filter(|r| r.error.is_some()).count();
    manifest.write(&args.out)?;
    Ok(())
}

pub fn cross_eval(ctx: &Ctx, args: &CrossEvalArgs) -> Result<()> {
    parse_split(&args.split)?;
    let mut manifest = ctx.manifest("cross-eval", args);
    let mut models: Vec<(String, Option<Box<dyn Predictor>>)> = Vec::new();
    for spec in &args.models {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--model expects NAME=PATH, got `{spec}`")))?;
        let path = Path::new(path);
        let model: Option<Box<dyn Predictor>> = if path.exists() {
            Some(Box::new(
                UnetModel::load(path).with_context(|| format!("loading {}", path.display()))?,
            ))
        } else {
            log::warn!("checkpoint {} for `{name}` is missing; its row stays empty", path.display());
            None
        };
        models.push((name.to_string(), model));
    }
    let sets: Vec<RecordSet> = args
        .datasets
        .iter()
        .map(|d| ctx.resolve_dataset(d, None)?.set(&args.split))
        .collect::<Result<_>>()?;
    let targets: Vec<&dyn SampleSource> = sets.iter().map(|s| s as &dyn SampleSource).collect();
    let matrix = plantseg::eval::cross_eval(&mut models, &targets)?;
    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("matrix.csv");
    matrix.write_csv(&csv_path)?;
    let table = matrix.render();
    let md = args.out.join("matrix.md");
    std::fs::write(&md, &table)?;
    manifest.output(&csv_path);
    manifest.output(&md);
    print!("{table}");
    manifest.write(&args.out)?;
    Ok(())
}
