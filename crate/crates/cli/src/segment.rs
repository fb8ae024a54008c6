//! fit-pca, segment, ablate-mask-input and pca-hist.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use plantseg::datasets::ImageRecord;
use plantseg::encoder::extract;
use plantseg::eval::{aggregate, comparison_table, iou, write_records, write_stats, EvalRecord, GroupBy};
use plantseg::maskops::DebugDump;
use plantseg::pca::{self, FitOptions, PcaModel};
use plantseg::pipeline::{fit_model, segment_image, SegmentOptions};
use plantseg::preprocess::{apply_geometry, plan_geometry};
use plantseg::{plot, Connectivity};
use serde_json::json;

use crate::args::{FitPcaArgs, ModelArgs, PcaHistArgs, SegmentArgs};
use crate::context::{parse_split, sharded, Ctx, EncoderFactory, Manifest, RefinerFactory, ResolvedDataset};
use crate::{write_errors, PartialFailure};

pub const MODEL_FILE: &str = "pca_model.bin";

fn fit(
    ctx: &Ctx,
    dataset: &ResolvedDataset,
    encoder: &EncoderFactory,
    split: &str,
    token_cap: usize,
    flip: bool,
) -> Result<PcaModel> {
    parse_split(split)?;
    let records = dataset.records(split)?;
    if records.is_empty() {
        return Err(plantseg::Error::invalid(format!("no {split} images to fit the PCA on")).into());
    }
    log::info!("fitting PCA on {} {} images of {}", records.len(), split, dataset.name);
    let options = FitOptions {
        token_cap,
        seed: ctx.seed,
        ..FitOptions::default()
    };
    let mut enc = encoder.make()?;
    let mut model = fit_model(
        enc.as_mut(),
        records.len(),
        &|i| records[i].load_image(),
        ctx.cache(),
        &options,
        flip,
    )?;
    model.fit_meta.fit_split = Some(split.to_string());
    Ok(model)
}

/// Loads `--model`, or fits one and saves it to `out`.
fn obtain_model(
    ctx: &Ctx,
    args: &ModelArgs,
    dataset: &ResolvedDataset,
    encoder: &EncoderFactory,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<PcaModel> {
    let model = match &args.model {
        Some(path) => {
            let model = PcaModel::load(path).with_context(|| format!("loading PCA model {}", path.display()))?;
            if model.fit_meta.encoder_id != encoder.id() {
                return Err(plantseg::Error::EncoderMismatch {
                    expected: model.fit_meta.encoder_id.clone(),
                    found: encoder.id().to_string(),
                }
                .into());
            }
            model
        }
        None => {
            let model = fit(ctx, dataset, encoder, &args.fit_split, args.token_cap, args.flip)?;
            let path = out.join(MODEL_FILE);
            model.save(&path)?;
            manifest.output(&path);
            model
        }
    };
    manifest.backend("pca", json!({"orientation_source": model.orientation_source, "fit": model.fit_meta}));
    Ok(model)
}

pub fn fit_pca(ctx: &Ctx, args: &FitPcaArgs) -> Result<()> {
    let mut manifest = ctx.manifest("fit-pca", args);
    let dataset = ctx.dataset(&args.data)?;
    let encoder = ctx.encoder(&args.encoder)?;
    manifest.backend("encoder", encoder.describe());
    manifest.dataset = Some(dataset.describe(&args.fit_split));
    std::fs::create_dir_all(&args.out)?;
    let model = fit(ctx, &dataset, &encoder, &args.fit_split, args.token_cap, args.flip)?;
    let path = args.out.join(MODEL_FILE);
    model.save(&path)?;
    manifest.output(&path);
    let summary = args.out.join("fit.json");
    std::fs::write(
        &summary,
        serde_json::to_vec_pretty(&json!({
            "explained_variance": model.explained_variance,
            "orientation": model.orientation,
            "orientation_source": model.orientation_source,
            "fit": model.fit_meta,
        }))?,
    )?;
    manifest.output(&summary);
    println!(
        "PCA on {} tokens ({} available), orientation {:?} -> {}",
        model.fit_meta.token_count,
        model.fit_meta.total_tokens,
        model.orientation_source,
        path.display()
    );
    manifest.write(&args.out)?;
    Ok(())
}

fn segment_options(args: &SegmentArgs) -> Result<SegmentOptions> {
    Ok(SegmentOptions {
        threshold: args.threshold,
        connectivity: Connectivity::from_count(args.connectivity).map_err(|e| crate::UsageError(e.to_string()))?,
        min_tokens: args.min_tokens,
        use_mask_input: args.use_mask_input,
        single_box: args.single_box,
        keep_intermediates: args.debug_dump,
        ..SegmentOptions::default()
    })
}

pub fn method_label(encoder: &str, refiner: &str, single_box: bool) -> String {
    let mut m = format!("{encoder}+{refiner}");
    if single_box {
        m.push_str("+single-box");
    }
    m
}

struct Arm<'a> {
    ctx: &'a Ctx,
    dataset: &'a ResolvedDataset,
    records: &'a [ImageRecord],
    model: &'a PcaModel,
    encoder: &'a EncoderFactory,
    refiner: &'a RefinerFactory,
    options: SegmentOptions,
    method: String,
    pred_dir: PathBuf,
    debug_dir: Option<PathBuf>,
}

struct ArmOutcome {
    results: Vec<EvalRecord>,
    errors: Vec<(String, String)>,
}

impl Arm<'_> {
    /// Writes `<id>_pred.png` per image and scores images with ground truth.
    fn run(&self) -> Result<ArmOutcome> {
        std::fs::create_dir_all(&self.pred_dir)?;
        if let Some(d) = &self.debug_dir {
            std::fs::create_dir_all(d)?;
        }
        let outcomes = sharded(
            self.records.len(),
            self.ctx.workers,
            || Ok((self.encoder.make()?, self.refiner.make()?)),
            |(enc, refiner), i| {
                let rec = &self.records[i];
                let (image, gt) = rec.load_pair()?;
                let out = segment_image(&image, self.model, enc.as_mut(), refiner.as_mut(), self.ctx.cache(), &self.options)?;
                out.mask.save_png(&self.pred_dir.join(format!("{}_pred.png", rec.id)))?;
                if let (Some(dir), Some(inter)) = (&self.debug_dir, &out.intermediates) {
                    DebugDump::new(&rec.id, &out.spec, &inter.components, &out.prompts)
                        .write(&dir.join(format!("{}.json", rec.id)))?;
                }
                log::debug!("{}: {} prompts", rec.id, out.prompts.len());
                gt.map(|gt| {
                    let score = iou(&out.mask, &gt)?;
                    Ok(EvalRecord {
                        image_id: rec.id.clone(),
                        dataset: self.dataset.name.clone(),
                        method: self.method.clone(),
                        iou: score.value,
                        mask_input_used: self.options.use_mask_input,
                        seed: self.ctx.seed,
                        both_empty: score.both_empty,
                    })
                })
                .transpose()
            },
        )?;
        let mut results = Vec::new();
        let mut errors = Vec::new();
        for (rec, r) in self.records.iter().zip(outcomes) {
            match r {
                Ok(Some(e)) => results.push(e),
                Ok(None) => {}
                Err(e) => {
                    log::error!("{}: {e}", rec.id);
                    errors.push((rec.id.clone(), e.to_string()));
                }
            }
        }
        Ok(ArmOutcome { results, errors })
    }
}

pub fn segment(ctx: &Ctx, args: &SegmentArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs/segment"));
    let mut manifest = ctx.manifest("segment", args);
    let dataset = ctx.dataset(&args.data)?;
    let (encoder, refiner) = (ctx.encoder(&args.encoder)?, ctx.refiner(&args.refiner)?);
    let options = segment_options(args)?;
    manifest.backend("encoder", encoder.describe());
    manifest.backend("refiner", refiner.describe());
    manifest.dataset = Some(dataset.describe(&args.split));
    std::fs::create_dir_all(&out)?;
    let records = dataset.records(&args.split)?;
    let model = obtain_model(ctx, &args.model, &dataset, &encoder, &out, &mut manifest)?;

    let arm = Arm {
        ctx,
        dataset: &dataset,
        records: &records,
        model: &model,
        encoder: &encoder,
        refiner: &refiner,
        options,
        method: method_label(encoder.id(), refiner.id(), args.single_box),
        pred_dir: out.join("predictions"),
        debug_dir: args.debug_dump.then(|| out.join("debug")),
    };
    let outcome = arm.run()?;
    manifest.output(&arm.pred_dir);
    if !outcome.results.is_empty() {
        let path = out.join("results.csv");
        write_records(&path, &outcome.results)?;
        manifest.output(&path);
        let stats = aggregate(&outcome.results, GroupBy::DatasetMethod);
        print!("{}", comparison_table(&stats, &[]));
    }
    println!(
        "{} of {} images segmented -> {}",
        records.len() - outcome.errors.len(),
        records.len(),
        arm.pred_dir.display()
    );
    finish(manifest, &out, &outcome.errors, records.len())
}

fn finish(mut manifest: Manifest, out: &Path, errors: &[(String, String)], total: usize) -> Result<()> {
    manifest.failures = errors.len();
    let log = (!errors.is_empty()).then(|| out.join("errors.csv"));
    if let Some(log) = &log {
        write_errors(log, errors)?;
        manifest.output(log);
    }
    manifest.write(out)?;
    match log {
        Some(log) => Err(PartialFailure {
            failed: errors.len(),
            total,
            log,
        }
        .into()),
        None => Ok(()),
    }
}

pub fn ablate(ctx: &Ctx, args: &SegmentArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs/ablate-mask-input"));
    let mut manifest = ctx.manifest("ablate-mask-input", args);
    let dataset = ctx.dataset(&args.data)?;
    let (encoder, refiner) = (ctx.encoder(&args.encoder)?, ctx.refiner(&args.refiner)?);
    let base = segment_options(args)?;
    manifest.backend("encoder", encoder.describe());
    manifest.backend("refiner", refiner.describe());
    manifest.dataset = Some(dataset.describe(&args.split));
    std::fs::create_dir_all(&out)?;
    let records = dataset.records(&args.split)?;
    let model = obtain_model(ctx, &args.model, &dataset, &encoder, &out, &mut manifest)?;

    let mut results = Vec::new();
    let mut errors = Vec::new();
    for (use_mask_input, dir) in [(false, "without_mask_input"), (true, "with_mask_input")] {
        let arm = Arm {
            ctx,
            dataset: &dataset,
            records: &records,
            model: &model,
            encoder: &encoder,
            refiner: &refiner,
            options: SegmentOptions {
                use_mask_input,
                ..base
            },
            method: method_label(encoder.id(), refiner.id(), args.single_box),
            pred_dir: out.join(dir).join("predictions"),
            debug_dir: args.debug_dump.then(|| out.join(dir).join("debug")),
        };
        let outcome = arm.run()?;
        manifest.output(&arm.pred_dir);
        results.extend(outcome.results);
        errors.extend(outcome.errors.into_iter().map(|(id, e)| (format!("{id} ({dir})"), e)));
    }
    if results.is_empty() {
        return Err(plantseg::Error::invalid("the ablation needs images with ground-truth masks").into());
    }
    let path = out.join("results.csv");
    write_records(&path, &results)?;
    manifest.output(&path);
    let stats = aggregate(&results, GroupBy::DatasetMethodMaskInput);
    let summary = out.join("summary.csv");
    write_stats(&summary, &stats)?;
    manifest.output(&summary);
    print!("{}", comparison_table(&stats, &[]));
    finish(manifest, &out, &errors, 2 * records.len())
}

pub fn pca_hist(ctx: &Ctx, args: &PcaHistArgs) -> Result<()> {
    if args.bins == 0 {
        return Err(crate::UsageError("--bins must be positive".into()).into());
    }
    let mut manifest = ctx.manifest("pca-hist", args);
    let dataset = ctx.dataset(&args.data)?;
    let encoder = ctx.encoder(&args.encoder)?;
    manifest.backend("encoder", encoder.describe());
    manifest.dataset = Some(dataset.describe(&args.split));
    std::fs::create_dir_all(&args.out)?;
    let model = obtain_model(ctx, &args.model, &dataset, &encoder, &args.out, &mut manifest)?;
    let records = dataset.records(&args.split)?;
    let masks = sharded(
        records.len(),
        ctx.workers,
        || encoder.make(),
        |enc, i| {
            let image = records[i].load_image()?;
            let spec = plan_geometry(image.height() as usize, image.width() as usize)?;
            let padded = apply_geometry(&image, &spec)?;
            let grid = match ctx.cache() {
                Some(c) => c.get_or_compute(enc.as_mut(), &padded, &spec)?,
                None => extract(enc.as_mut(), &padded, &spec)?,
            };
            pca::classify(&grid, &model, 0.0)
        },
    )?
    .into_iter()
    .collect::<plantseg::Result<Vec<_>>>()?;
    let hist = pca::score_histogram(&masks, args.bins)?;

    let csv_path = args.out.join("pca_hist.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["bin_low", "bin_high", "count"])?;
    for (i, c) in hist.counts.iter().enumerate() {
        w.write_record([hist.edges[i].to_string(), hist.edges[i + 1].to_string(), c.to_string()])?;
    }
    w.flush()?;
    let png = args.out.join("pca_hist.png");
    plot::histogram_png(&hist, &png)?;
    manifest.output(&csv_path);
    manifest.output(&png);
    let positive: u64 = hist
        .counts
        .iter()
        .zip(hist.edges.windows(2))
        .filter(|(_, e)| e[0] >= 0.0)
        .map(|(c, _)| c)
        .sum();
    println!(
        "{} tokens from {} images, {:.1}% in bins at or above 0 -> {}",
        hist.total(),
        records.len(),
        100.0 * positive as f64 / hist.total().max(1) as f64,
        png.display()
    );
    manifest.write(&args.out)?;
    Ok(())
}
