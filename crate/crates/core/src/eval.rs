//! IoU scoring, mean ± std aggregation and comparison tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

/// Intersection over union of two masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouScore {
    pub value: f64,
    /// Both masks were empty and `value` is 1 by convention.
    pub both_empty: bool,
}

/// `|pred ∩ gt| / |pred ∪ gt|`. Two empty masks agree perfectly (1.0, flagged);
/// exactly one empty mask scores 0.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<IouScore> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            found: pred.dims(),
        });
    }
    let (mut inter, mut uni) = (0u64, 0u64);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (a & b) as u64;
        uni += (a | b) as u64;
    }
    Ok(if uni == 0 {
        IouScore {
            value: 1.0,
            both_empty: true,
        }
    } else {
        IouScore {
            value: inter as f64 / uni as f64,
            both_empty: false,
        }
    })
}

/// One scored image. Field order is the results CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub dataset: String,
    pub method: String,
    pub iou: f64,
    pub mask_input_used: bool,
    pub seed: u64,
    #[serde(default)]
    pub both_empty: bool,
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let records = r.deserialize().collect::<std::result::Result<Vec<EvalRecord>, _>>()?;
    for rec in &records {
        if !(0.0..=1.0).contains(&rec.iou) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("iou {} of {} outside [0, 1]", rec.iou, rec.image_id),
            });
        }
    }
    Ok(records)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Dataset,
    Method,
    DatasetMethod,
    /// Dataset, method and whether a mask prompt was used.
    DatasetMethodMaskInput,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct GroupKey {
    pub dataset: Option<String>,
    pub method: Option<String>,
    pub mask_input_used: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    #[serde(flatten)]
    pub key: GroupKey,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl GroupKey {
    fn of(r: &EvalRecord, by: GroupBy) -> Self {
        let d = Some(r.dataset.clone());
        let m = Some(r.method.clone());
        match by {
            GroupBy::Dataset => Self {
                dataset: d,
                method: None,
                mask_input_used: None,
            },
            GroupBy::Method => Self {
                dataset: None,
                method: m,
                mask_input_used: None,
            },
            GroupBy::DatasetMethod => Self {
                dataset: d,
                method: m,
                mask_input_used: None,
            },
            GroupBy::DatasetMethodMaskInput => Self {
                dataset: d,
                method: m,
                mask_input_used: Some(r.mask_input_used),
            },
        }
    }
}

/// Mean ± population std of IoU per group, ordered by key. The result does
/// not depend on record order.
pub fn aggregate(records: &[EvalRecord], by: GroupBy) -> Vec<GroupStats> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(GroupKey::of(r, by)).or_default().push(r.iou);
    }
    groups
        .into_iter()
        .map(|(key, mut v)| {
            // fixed summation order
            v.sort_by(f64::total_cmp);
            let (mean, std) = mean_std(&v);
            GroupStats {
                key,
                count: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_stats(path: &Path, stats: &[GroupStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "method", "mask_input_used", "count", "mean", "std"])?;
    for s in stats {
        w.write_record([
            s.key.dataset.clone().unwrap_or_default(),
            s.key.method.clone().unwrap_or_default(),
            s.key.mask_input_used.map(|b| b.to_string()).unwrap_or_default(),
            s.count.to_string(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `0.672 ± 0.289`
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

/// Markdown table with one row per label and one column per dataset.
/// `rows` maps a row label to its `(dataset -> (mean, std))` cells; missing
/// cells render as `n/a`.
pub fn render_table(corner: &str, columns: &[String], rows: &[(String, BTreeMap<String, (f64, f64)>)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {corner} |"));
    for c in columns {
        out.push_str(&format!(" {c} |"));
    }
    out.push('\n');
    out.push('|');
    out.push_str(&"---|".repeat(columns.len() + 1));
    out.push('\n');
    for (label, cells) in rows {
        out.push_str(&format!("| {label} |"));
        for c in columns {
            match cells.get(c) {
                Some(&(m, s)) => out.push_str(&format!(" {} |", format_cell(m, s))),
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Method-by-dataset comparison table from dataset/method group stats.
/// With mask-input grouping, rows are labelled `method (mask input)`.
pub fn comparison_table(stats: &[GroupStats], dataset_order: &[&str]) -> String {
    let mut columns: Vec<String> = dataset_order.iter().map(|s| s.to_string()).collect();
    let mut rows: BTreeMap<String, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    for s in stats {
        let dataset = s.key.dataset.clone().unwrap_or_else(|| "all".into());
        if !columns.contains(&dataset) {
            columns.push(dataset.clone());
        }
        let mut label = s.key.method.clone().unwrap_or_else(|| "all".into());
        match s.key.mask_input_used {
            Some(true) => label.push_str(" (with mask input)"),
            Some(false) => label.push_str(" (without mask input)"),
            None => {}
        }
        rows.entry(label).or_default().insert(dataset, (s.mean, s.std));
    }
    let present: Vec<String> = columns
        .into_iter()
        .filter(|c| rows.values().any(|r| r.contains_key(c)))
        .collect();
    render_table("Method", &present, &rows.into_iter().collect::<Vec<_>>())
}

/// One image with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub gt: Mask,
}

/// A named evaluation split whose samples may be loaded lazily.
pub trait SampleSource {
    fn name(&self) -> &str;
    fn samples(&self) -> Box<dyn Iterator<Item = Result<Sample>> + '_>;
}

#[derive(Debug, Clone)]
pub struct InMemorySet {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl SampleSource for InMemorySet {
    fn name(&self) -> &str {
        &self.name
    }

    fn samples(&self) -> Box<dyn Iterator<Item = Result<Sample>> + '_> {
        Box::new(self.samples.iter().cloned().map(Ok))
    }
}

/// Anything that maps an image to a mask of the same size.
pub trait Predictor {
    fn predict(&mut self, image: &RgbImage) -> Result<Mask>;
}

/// Predicts the same value everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub bool);

impl Predictor for ConstantPredictor {
    fn predict(&mut self, image: &RgbImage) -> Result<Mask> {
        Ok(Mask::filled(image.height() as usize, image.width() as usize, self.0))
    }
}

/// Scores `predictor` on every sample of `set`.
pub fn evaluate(predictor: &mut dyn Predictor, set: &dyn SampleSource, method: &str, seed: u64) -> Result<Vec<EvalRecord>> {
    set.samples()
        .map(|s| {
            let s = s?;
            let pred = predictor.predict(&s.image)?;
            let score = iou(&pred, &s.gt)?;
            Ok(EvalRecord {
                image_id: s.id,
                dataset: set.name().to_string(),
                method: method.to_string(),
                iou: score.value,
                mask_input_used: false,
                seed,
                both_empty: score.both_empty,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Train-dataset by test-dataset score matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `cells[i][j]`: model trained on `sources[i]` scored on `targets[j]`;
    /// `None` when that model is missing.
    pub cells: Vec<Vec<Option<CellStats>>>,
}

impl CrossMatrix {
    pub fn render(&self) -> String {
        let rows: Vec<(String, BTreeMap<String, (f64, f64)>)> = self
            .sources
            .iter()
            .zip(&self.cells)
            .map(|(src, row)| {
                let cells = self
                    .targets
                    .iter()
                    .zip(row)
                    .filter_map(|(t, c)| c.map(|c| (t.clone(), (c.mean, c.std))))
                    .collect();
                (src.clone(), cells)
            })
            .collect();
        render_table("Train / Test", &self.targets, &rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "train,test,count,mean,std")?;
        for (src, row) in self.sources.iter().zip(&self.cells) {
            for (tgt, cell) in self.targets.iter().zip(row) {
                match cell {
                    Some(c) => writeln!(f, "{src},{tgt},{},{:.6},{:.6}", c.count, c.mean, c.std)?,
                    None => writeln!(f, "{src},{tgt},0,,")?,
                }
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Scores every model on every target split.
pub fn cross_eval(
    models: &mut [(String, Option<Box<dyn Predictor + '_>>)],
    targets: &[&dyn SampleSource],
) -> Result<CrossMatrix> {
    let mut cells = Vec::with_capacity(models.len());
    for (_, model) in models.iter_mut() {
        let mut row = Vec::with_capacity(targets.len());
        for &t in targets {
            row.push(match model {
                None => None,
                Some(m) => {
                    let recs = evaluate(m.as_mut(), t, "cross", 0)?;
                    let v: Vec<f64> = recs.iter().map(|r| r.iou).collect();
                    let (mean, std) = mean_std(&v);
                    Some(CellStats {
                        count: v.len(),
                        mean,
                        std,
                    })
                }
            });
        }
        cells.push(row);
    }
    Ok(CrossMatrix {
        sources: models.iter().map(|(n, _)| n.clone()).collect(),
        targets: targets.iter().map(|t| t.name().to_string()).collect(),
        cells,
    })
}
