//! Loaders for the four plant corpora and their instance → semantic merge.
//!
//! Every dataset is read from `<root>/<split>/...` with `split` one of
//! `train`, `val`, `test`:
//!
//! | dataset       | images                          | masks                              |
//! |---------------|---------------------------------|------------------------------------|
//! | `phenobench`  | `images/<id>.png`               | `semantics/<id>.png` (class ids)   |
//! | `appletree`   | `images/<id>.{png,jpg,jpeg}`    | `masks/<id>.png` (binary or ids)   |
//! | `plantgrowth` | `images/<id>.{png,jpg,jpeg}`    | `masks/<id>.png` (binary or ids)   |
//! | `cvppp2017`   | `<subset>/<name>_rgb.png`       | `<subset>/<name>_label.png` (leaf ids) |
//!
//! Mask directories are optional (unlabelled test splits). Every nonzero
//! label is plant: PhenoBench crop, weed and partial classes all merge into
//! one class, and CVPPP leaf instances merge into whole plants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{Sample, SampleSource};
use crate::maskops::{components, Connectivity};
use crate::raster::Mask;
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Phenobench,
    Appletree,
    Plantgrowth,
    Cvppp2017,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::Phenobench,
        DatasetId::Appletree,
        DatasetId::Plantgrowth,
        DatasetId::Cvppp2017,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Phenobench => "phenobench",
            DatasetId::Appletree => "appletree",
            DatasetId::Plantgrowth => "plantgrowth",
            DatasetId::Cvppp2017 => "cvppp2017",
        }
    }

    fn mask_dir(&self) -> &'static str {
        match self {
            DatasetId::Phenobench => "semantics",
            _ => "masks",
        }
    }

    /// Human-readable description of the expected directory layout.
    pub fn layout(&self) -> String {
        match self {
            DatasetId::Cvppp2017 => "  <root>/{train,val,test}/<subset>/<name>_rgb.png\n  \
                 <root>/{train,val,test}/<subset>/<name>_label.png   (leaf instance ids)"
                .to_string(),
            _ => format!(
                "  <root>/{{train,val,test}}/images/<id>.(png|jpg|jpeg)\n  \
                 <root>/{{train,val,test}}/{}/<id>.png",
                self.mask_dir()
            ),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dataset `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}`")))
    }
}

/// One image of a dataset. Pixels are read on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub split: Split,
    pub dataset: DatasetId,
}

impl ImageRecord {
    pub fn load_image(&self) -> Result<RgbImage> {
        Ok(image::open(&self.image_path)?.to_rgb8())
    }

    /// Binary plant mask, merged from instance or class labels.
    pub fn load_gt(&self) -> Result<Option<Mask>> {
        let Some(path) = &self.mask_path else {
            return Ok(None);
        };
        let labels = LabelRaster::load(path)?;
        merge_instances(&labels).map(Some)
    }

    /// Image and ground truth, checking they have the same size.
    pub fn load_pair(&self) -> Result<(RgbImage, Option<Mask>)> {
        let image = self.load_image()?;
        let gt = self.load_gt()?;
        if let Some(gt) = &gt {
            let dims = (image.height() as usize, image.width() as usize);
            if gt.dims() != dims {
                return Err(Error::Format {
                    path: self.mask_path.clone().unwrap_or_default(),
                    message: format!("mask is {:?} but image is {dims:?}", gt.dims()),
                });
            }
        }
        Ok((image, gt))
    }
}

/// Integer label raster (instance or class ids).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i64>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid("label buffer does not match dimensions"));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// Reads a label PNG. Gray images keep their values; color images
    /// (palette-encoded instance maps) pack RGB into one id.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let labels: Vec<i64> = match img {
            DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(i64::from).collect(),
            DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(i64::from).collect(),
            DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| i64::from(p[0])).collect(),
            other => other
                .to_rgb8()
                .pixels()
                .map(|p| (i64::from(p[0]) << 16) | (i64::from(p[1]) << 8) | i64::from(p[2]))
                .collect(),
        };
        Self::new(h, w, labels)
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let buf: Vec<u16> = self.labels.iter().map(|&v| v.clamp(0, u16::MAX as i64) as u16).collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer matches dims");
        img.save(path)?;
        Ok(())
    }
}

/// Plant mask from instance or class labels: true wherever the label is
/// nonzero. Already-binary masks pass through unchanged.
pub fn merge_instances(labels: &LabelRaster) -> Result<Mask> {
    if let Some(&neg) = labels.labels.iter().find(|&&v| v < 0) {
        return Err(Error::NegativeLabel(neg));
    }
    Mask::from_vec(
        labels.height,
        labels.width,
        labels.labels.iter().map(|&v| v != 0).collect(),
    )
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() {
            out.push(p);
        }
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn orphan_error(mut orphans: Vec<String>) -> Error {
    orphans.sort();
    Error::Orphans {
        count: orphans.len(),
        sample: orphans.into_iter().take(10).collect(),
    }
}

/// Records of one split, sorted by id.
///
/// A missing root is an error; a root without the split directory yields no
/// records and a layout warning.
pub fn load(dataset: DatasetId, root: &Path, split: Split) -> Result<Vec<ImageRecord>> {
    if !root.is_dir() {
        return Err(Error::MissingRoot {
            root: root.to_path_buf(),
            layout: dataset.layout(),
        });
    }
    let split_dir = root.join(split.as_str());
    if !split_dir.is_dir() {
        log::warn!(
            "{dataset}: no `{split}` directory under {}; expected layout:\n{}",
            root.display(),
            dataset.layout()
        );
        return Ok(Vec::new());
    }
    let mut records = match dataset {
        DatasetId::Cvppp2017 => load_cvppp(&split_dir, split)?,
        _ => load_paired_dirs(dataset, &split_dir, split)?,
    };
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

fn load_paired_dirs(dataset: DatasetId, split_dir: &Path, split: Split) -> Result<Vec<ImageRecord>> {
    let image_dir = split_dir.join("images");
    if !image_dir.is_dir() {
        log::warn!(
            "{dataset}: {} has no images/ directory; expected layout:\n{}",
            split_dir.display(),
            dataset.layout()
        );
        return Ok(Vec::new());
    }
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in list_files(&image_dir)? {
        if has_ext(&p, &IMAGE_EXTS) {
            images.insert(stem(&p), p);
        }
    }
    let mask_dir = split_dir.join(dataset.mask_dir());
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    if mask_dir.is_dir() {
        for p in list_files(&mask_dir)? {
            if has_ext(&p, &["png"]) {
                masks.insert(stem(&p), p);
            }
        }
    }
    if !masks.is_empty() {
        let orphans: Vec<String> = images
            .keys()
            .filter(|k| !masks.contains_key(*k))
            .map(|k| format!("images/{k} (no mask)"))
            .chain(
                masks
                    .keys()
                    .filter(|k| !images.contains_key(*k))
                    .map(|k| format!("{}/{k} (no image)", dataset.mask_dir())),
            )
            .collect();
        if !orphans.is_empty() {
            return Err(orphan_error(orphans));
        }
    }
    Ok(images
        .into_iter()
        .map(|(id, image_path)| ImageRecord {
            mask_path: masks.remove(&id),
            id,
            image_path,
            split,
            dataset,
        })
        .collect())
}

fn load_cvppp(split_dir: &Path, split: Split) -> Result<Vec<ImageRecord>> {
    let mut dirs = vec![(String::new(), split_dir.to_path_buf())];
    for entry in fs::read_dir(split_dir)? {
        let p = entry?.path();
        if p.is_dir() {
            dirs.push((format!("{}_", stem(&p)), p));
        }
    }
    let mut records = Vec::new();
    let mut orphans = Vec::new();
    for (prefix, dir) in dirs {
        let mut rgb: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut labels: BTreeSet<String> = BTreeSet::new();
        for p in list_files(&dir)? {
            let s = stem(&p);
            if let Some(name) = s.strip_suffix("_rgb") {
                rgb.insert(name.to_string(), p);
            } else if let Some(name) = s.strip_suffix("_label") {
                labels.insert(name.to_string());
            }
        }
        let labelled = !labels.is_empty();
        for name in labels.iter().filter(|n| !rgb.contains_key(*n)) {
            orphans.push(format!("{prefix}{name}_label (no image)"));
        }
        for (name, image_path) in rgb {
            let mask_path = dir.join(format!("{name}_label.png"));
            let mask_path = if labels.contains(&name) {
                Some(mask_path)
            } else {
                if labelled {
                    orphans.push(format!("{prefix}{name}_rgb (no label)"));
                }
                None
            };
            records.push(ImageRecord {
                id: format!("{prefix}{name}"),
                image_path,
                mask_path,
                split,
                dataset: DatasetId::Cvppp2017,
            });
        }
    }
    if !orphans.is_empty() {
        return Err(orphan_error(orphans));
    }
    Ok(records)
}

/// Per-split counts found under a dataset root.
#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub dataset: String,
    pub splits: BTreeMap<String, SplitCounts>,
    pub total: usize,
    pub checksum_failures: Vec<String>,
    pub checksums_checked: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SplitCounts {
    pub images: usize,
    pub with_masks: usize,
}

/// Checks layout and counts of every split, and optionally a `sha256sum`-style
/// manifest of `<hex digest>  <path relative to root>` lines.
pub fn verify(dataset: DatasetId, root: &Path, checksums: Option<&Path>) -> Result<VerifyReport> {
    let mut report = VerifyReport {
        dataset: dataset.to_string(),
        ..Default::default()
    };
    for split in Split::ALL {
        let recs = load(dataset, root, split)?;
        let counts = SplitCounts {
            images: recs.len(),
            with_masks: recs.iter().filter(|r| r.mask_path.is_some()).count(),
        };
        report.total += counts.images;
        report.splits.insert(split.to_string(), counts);
    }
    if let Some(manifest) = checksums {
        for line in fs::read_to_string(manifest)?.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (digest, rel) = line.split_once(char::is_whitespace).ok_or_else(|| Error::Format {
                path: manifest.to_path_buf(),
                message: format!("bad checksum line `{line}`"),
            })?;
            let rel = rel.trim().trim_start_matches('*');
            report.checksums_checked += 1;
            let ok = fs::read(root.join(rel))
                .map(|bytes| hex::encode(Sha256::digest(&bytes)).eq_ignore_ascii_case(digest))
                .unwrap_or(false);
            if !ok {
                report.checksum_failures.push(rel.to_string());
            }
        }
    }
    Ok(report)
}

/// Records of one split as lazily-loaded evaluation samples. Records without a
/// mask are skipped.
pub struct RecordSet {
    pub name: String,
    pub records: Vec<ImageRecord>,
}

impl SampleSource for RecordSet {
    fn name(&self) -> &str {
        &self.name
    }

    fn samples(&self) -> Box<dyn Iterator<Item = Result<Sample>> + '_> {
        Box::new(self.records.iter().filter(|r| r.mask_path.is_some()).map(|r| {
            let (image, gt) = r.load_pair()?;
            Ok(Sample {
                id: r.id.clone(),
                image,
                gt: gt.expect("filtered on mask presence"),
            })
        }))
    }
}

/// Image count per split of the bundled mini fixtures.
pub const MINI_SPLIT_SIZES: [(Split, usize); 3] = [(Split::Train, 4), (Split::Val, 4), (Split::Test, 2)];

/// Writes a small synthetic look-alike of `dataset` under `root`, in that
/// dataset's layout and label encoding. Deterministic in `seed`.
pub fn write_mini_fixture(dataset: DatasetId, root: &Path, seed: u64) -> Result<usize> {
    let mut written = 0;
    for (si, (split, n)) in MINI_SPLIT_SIZES.into_iter().enumerate() {
        for i in 0..n {
            let scene_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((dataset as u64) << 32)
                .wrapping_add((si * 1000 + i) as u64);
            let (h, w) = (168 + 14 * (i % 3), 224 + 14 * (i % 2));
            let scene = synth::rect_scene(h, w, scene_seed);
            let labels = instance_labels(&scene.label, dataset);
            let name = format!("{}_{:03}", dataset.as_str(), si * 100 + i);
            match dataset {
                DatasetId::Cvppp2017 => {
                    let dir = root.join(split.as_str()).join("A1");
                    fs::create_dir_all(&dir)?;
                    scene.image.save(dir.join(format!("{name}_rgb.png")))?;
                    labels.save_png16(&dir.join(format!("{name}_label.png")))?;
                }
                _ => {
                    let img_dir = root.join(split.as_str()).join("images");
                    let mask_dir = root.join(split.as_str()).join(dataset.mask_dir());
                    fs::create_dir_all(&img_dir)?;
                    fs::create_dir_all(&mask_dir)?;
                    scene.image.save(img_dir.join(format!("{name}.png")))?;
                    let mask_path = mask_dir.join(format!("{name}.png"));
                    match dataset {
                        DatasetId::Phenobench => labels.save_png16(&mask_path)?,
                        _ => scene.label.save_png(&mask_path)?,
                    }
                }
            }
            written += 1;
        }
    }
    Ok(written)
}

/// Labels mimicking each corpus: PhenoBench alternates crop (1) and weed (2)
/// classes per plant, CVPPP splits each plant into left and right "leaves".
fn instance_labels(label: &Mask, dataset: DatasetId) -> LabelRaster {
    let (h, w) = label.dims();
    let mut out = vec![0i64; h * w];
    for (k, comp) in components(label, Connectivity::Four, 1).iter().enumerate() {
        let mid = (comp.bbox.col_min + comp.bbox.col_max) / 2;
        for &(y, x) in &comp.cells {
            out[y * w + x] = match dataset {
                DatasetId::Phenobench => 1 + (k as i64 % 2),
                DatasetId::Cvppp2017 => 1 + 2 * k as i64 + (x > mid) as i64,
                _ => 255,
            };
        }
    }
    LabelRaster {
        height: h,
        width: w,
        labels: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_basic() {
        let l = LabelRaster::new(1, 4, vec![0, 1, 2, 7]).unwrap();
        assert_eq!(merge_instances(&l).unwrap().as_slice(), &[false, true, true, true]);
        let zero = LabelRaster::new(2, 2, vec![0; 4]).unwrap();
        assert!(merge_instances(&zero).unwrap().is_empty());
        let neg = LabelRaster::new(1, 2, vec![0, -3]).unwrap();
        assert!(matches!(merge_instances(&neg), Err(Error::NegativeLabel(-3))));
    }

    #[test]
    fn merge_is_idempotent_on_binary() {
        let l = LabelRaster::new(2, 3, vec![0, 1, 1, 0, 0, 1]).unwrap();
        let once = merge_instances(&l).unwrap();
        let again = LabelRaster::new(2, 3, once.as_slice().iter().map(|&b| b as i64).collect()).unwrap();
        assert_eq!(merge_instances(&again).unwrap(), once);
    }

    #[test]
    fn missing_root_is_actionable() {
        let err = load(DatasetId::Appletree, Path::new("/nonexistent/appletree"), Split::Val).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("images/<id>"), "{msg}");
    }

    #[test]
    fn empty_root_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        for d in DatasetId::ALL {
            assert!(load(d, dir.path(), Split::Val).unwrap().is_empty());
        }
    }

    #[test]
    fn three_pairs_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("val");
        fs::create_dir_all(split.join("images")).unwrap();
        fs::create_dir_all(split.join("masks")).unwrap();
        for id in ["c", "a", "b"] {
            RgbImage::new(20, 20).save(split.join("images").join(format!("{id}.png"))).unwrap();
            Mask::new(20, 20).save_png(&split.join("masks").join(format!("{id}.png"))).unwrap();
        }
        let recs = load(DatasetId::Plantgrowth, dir.path(), Split::Val).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn orphans_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("train");
        fs::create_dir_all(split.join("images")).unwrap();
        fs::create_dir_all(split.join("masks")).unwrap();
        RgbImage::new(20, 20).save(split.join("images/a.png")).unwrap();
        RgbImage::new(20, 20).save(split.join("images/b.png")).unwrap();
        Mask::new(20, 20).save_png(&split.join("masks/a.png")).unwrap();
        Mask::new(20, 20).save_png(&split.join("masks/z.png")).unwrap();
        match load(DatasetId::Appletree, dir.path(), Split::Train) {
            Err(Error::Orphans { count, sample }) => {
                assert_eq!(count, 2);
                assert!(sample.iter().any(|s| s.contains("b")));
                assert!(sample.iter().any(|s| s.contains("z")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mini_fixtures_load_with_binary_gt() {
        let dir = tempfile::tempdir().unwrap();
        for d in DatasetId::ALL {
            let root = dir.path().join(d.as_str());
            let n = write_mini_fixture(d, &root, 1).unwrap();
            let report = verify(d, &root, None).unwrap();
            assert_eq!(report.total, n);
            let recs = load(d, &root, Split::Val).unwrap();
            assert_eq!(recs.len(), 4);
            let (img, gt) = recs[0].load_pair().unwrap();
            let gt = gt.unwrap();
            assert_eq!(gt.dims(), (img.height() as usize, img.width() as usize));
            assert!(gt.count() > 0);
        }
    }

    #[test]
    fn checksum_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_mini_fixture(DatasetId::Appletree, dir.path(), 2).unwrap();
        let rel = "val/images/appletree_100.png";
        let digest = hex::encode(Sha256::digest(fs::read(dir.path().join(rel)).unwrap()));
        let manifest = dir.path().join("SHA256SUMS");
        fs::write(&manifest, format!("{digest}  {rel}\n{}  val/images/appletree_101.png\n", "0".repeat(64))).unwrap();
        let r = verify(DatasetId::Appletree, dir.path(), Some(&manifest)).unwrap();
        assert_eq!(r.checksums_checked, 2);
        assert_eq!(r.checksum_failures, vec!["val/images/appletree_101.png".to_string()]);
    }
}
