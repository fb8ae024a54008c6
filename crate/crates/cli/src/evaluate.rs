//! evaluate and report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use plantseg::eval::{
    aggregate, comparison_table, iou, read_records, render_table, write_records, write_stats, EvalRecord, GroupBy,
};
use plantseg::{datasets::DatasetId, Mask};

use crate::args::{EvaluateArgs, ReportArgs};
use crate::context::{sharded, Ctx};
use crate::{write_errors, PartialFailure};

pub fn evaluate(ctx: &Ctx, args: &EvaluateArgs) -> Result<()> {
    let mut manifest = ctx.manifest("evaluate", args);
    let dataset = ctx.dataset(&args.data)?;
    manifest.dataset = Some(dataset.describe(&args.split));
    if !args.predictions.is_dir() {
        return Err(plantseg::Error::invalid(format!(
            "prediction directory {} does not exist",
            args.predictions.display()
        ))
        .into());
    }
    let records: Vec<_> = dataset
        .records(&args.split)?
        .into_iter()
        .filter(|r| r.mask_path.is_some())
        .collect();
    let scored = sharded(
        records.len(),
        ctx.workers,
        || Ok(()),
        |_, i| {
            let rec = &records[i];
            let pred = Mask::load_png(&args.predictions.join(format!("{}_pred.png", rec.id)))?;
            let gt = rec.load_gt()?.expect("filtered on mask presence");
            let score = iou(&pred, &gt)?;
            Ok(EvalRecord {
                image_id: rec.id.clone(),
                dataset: dataset.name.clone(),
                method: args.method.clone(),
                iou: score.value,
                mask_input_used: args.mask_input_used,
                seed: ctx.seed,
                both_empty: score.both_empty,
            })
        },
    )?;
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for (rec, r) in records.iter().zip(scored) {
        match r {
            Ok(e) => results.push(e),
            Err(e) => errors.push((rec.id.clone(), e.to_string())),
        }
    }
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("results.csv");
    write_records(&path, &results)?;
    manifest.output(&path);
    let stats = aggregate(&results, GroupBy::DatasetMethod);
    let summary = args.out.join("summary.csv");
    write_stats(&summary, &stats)?;
    manifest.output(&summary);
    for s in &stats {
        println!(
            "{} {}: {} over {} images",
            s.key.dataset.as_deref().unwrap_or(""),
            s.key.method.as_deref().unwrap_or(""),
            plantseg::eval::format_cell(s.mean, s.std),
            s.count
        );
    }
    manifest.failures = errors.len();
    if !errors.is_empty() {
        let log = args.out.join("errors.csv");
        write_errors(&log, &errors)?;
        manifest.output(&log);
        manifest.write(&args.out)?;
        return Err(PartialFailure {
            failed: errors.len(),
            total: records.len(),
            log,
        }
        .into());
    }
    manifest.write(&args.out)?;
    Ok(())
}

/// One row of a cross-evaluation matrix CSV.
#[derive(serde::Deserialize)]
struct CrossRow {
    train: String,
    test: String,
    #[allow(dead_code)]
    count: usize,
    mean: Option<f64>,
    std: Option<f64>,
}

fn dataset_order() -> Vec<&'static str> {
    DatasetId::ALL.iter().map(|d| d.as_str()).collect()
}

/// Markdown tables for the given result and matrix files. Depends on file
/// contents only.
pub fn render_report(results: &[&Path], cross: &[&Path]) -> Result<String> {
    let mut out = String::new();
    let mut records: Vec<EvalRecord> = Vec::new();
    for p in results {
        records.extend(read_records(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let order = dataset_order();
    if !records.is_empty() {
        let by_method: Vec<EvalRecord> = records.iter().filter(|r| !r.mask_input_used).cloned().collect();
        if !by_method.is_empty() {
            writeln!(out, "## Mean IoU by method\n")?;
            out.push_str(&comparison_table(&aggregate(&by_method, GroupBy::DatasetMethod), &order));
            out.push('\n');
        }
        if records.iter().any(|r| r.mask_input_used) {
            writeln!(out, "## Mask-input ablation\n")?;
            out.push_str(&comparison_table(&aggregate(&records, GroupBy::DatasetMethodMaskInput), &order));
            out.push('\n');
        }
    }
    for p in cross {
        let mut reader = csv::Reader::from_path(p).with_context(|| format!("reading {}", p.display()))?;
        let mut targets: Vec<String> = Vec::new();
        let mut rows: Vec<(String, BTreeMap<String, (f64, f64)>)> = Vec::new();
        for row in reader.deserialize::<CrossRow>() {
            let row = row.with_context(|| format!("parsing {}", p.display()))?;
            if !targets.contains(&row.test) {
                targets.push(row.test.clone());
            }
            let idx = match rows.iter().position(|(s, _)| *s == row.train) {
                Some(i) => i,
                None => {
                    rows.push((row.train.clone(), BTreeMap::new()));
                    rows.len() - 1
                }
            };
            if let (Some(m), Some(s)) = (row.mean, row.std) {
                rows[idx].1.insert(row.test, (m, s));
            }
        }
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix");
        writeln!(out, "## Cross-dataset evaluation ({name})\n")?;
        out.push_str(&render_table("Train / Test", &targets, &rows));
        out.push('\n');
    }
    if out.is_empty() {
        out.push_str("no results\n");
    }
    Ok(out)
}

pub fn report(ctx: &Ctx, args: &ReportArgs) -> Result<()> {
    if args.results.is_empty() && args.cross.is_empty() {
        return Err(crate::UsageError("pass at least one --results or --cross file".into()).into());
    }
    let results: Vec<&Path> = args.results.iter().map(|p| p.as_path()).collect();
    let cross: Vec<&Path> = args.cross.iter().map(|p| p.as_path()).collect();
    let text = render_report(&results, &cross)?;
    print!("{text}");
    if let Some(dir) = &args.out {
        let mut manifest = ctx.manifest("report", args);
        std::fs::create_dir_all(dir)?;
        let path = dir.join("report.md");
        std::fs::write(&path, &text)?;
        manifest.output(&path);
        manifest.write(dir)?;
    }
    Ok(())
}
