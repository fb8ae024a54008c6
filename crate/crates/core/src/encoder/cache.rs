//! On-disk token cache.
//!
//! One file per (image content, encoder, geometry). Layout:
//!
//! ```text
//! b"PSTG" | version: u32 LE | header_len: u32 LE | header JSON | f32 LE payload
//! ```
//!
//! The JSON header records `rows`, `cols`, `dim`, `encoder_id`,
//! `content_hash` and the geometry, so a file can be read without any other
//! context. The payload is `rows * cols * dim` floats in row-major token order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{extract, Encoder, TokenGrid};
use crate::error::{Error, Result};
use crate::preprocess::GeometrySpec;

const MAGIC: &[u8; 4] = b"PSTG";
const VERSION: u32 = 1;

/// Hex SHA-256 over the image dimensions and raw RGB bytes.
pub fn content_hash(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Header {
    rows: usize,
    cols: usize,
    dim: usize,
    encoder_id: String,
    content_hash: String,
    spec: GeometrySpec,
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

enum Lookup {
    Hit(TokenGrid),
    Miss,
    Corrupt(String),
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, content_hash: &str, encoder_id: &str, spec: &GeometrySpec) -> PathBuf {
        let mut h = Sha256::new();
        h.update(content_hash.as_bytes());
        h.update([0]);
        h.update(encoder_id.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(spec).expect("geometry serializes"));
        self.dir.join(format!("{}.tok", hex::encode(h.finalize())))
    }

    /// Returns the cached grid, computing and storing it on a miss.
    pub fn get_or_compute(
        &self,
        encoder: &mut dyn Encoder,
        image: &RgbImage,
        spec: &GeometrySpec,
    ) -> Result<TokenGrid> {
        let hash = content_hash(image);
        let encoder_id = encoder.id().to_string();
        let path = self.entry_path(&hash, &encoder_id, spec);
        match read_entry(&path, &hash, &encoder_id, spec) {
            Lookup::Hit(grid) => return Ok(grid),
            Lookup::Miss => {}
            Lookup::Corrupt(why) => {
                log::warn!("recomputing corrupt cache entry {}: {why}", path.display());
            }
        }
        let grid = extract(encoder, image, spec)?;
        write_entry(&path, &grid, &hash)?;
        Ok(grid)
    }

    /// Makes sure a valid entry exists and returns its path. Avoids holding
    /// the grid in memory when only the file is needed.
    pub fn ensure(&self, encoder: &mut dyn Encoder, image: &RgbImage, spec: &GeometrySpec) -> Result<PathBuf> {
        let hash = content_hash(image);
        let encoder_id = encoder.id().to_string();
        let path = self.entry_path(&hash, &encoder_id, spec);
        match read_entry(&path, &hash, &encoder_id, spec) {
            Lookup::Hit(_) => return Ok(path),
            Lookup::Miss => {}
            Lookup::Corrupt(why) => {
                log::warn!("recomputing corrupt cache entry {}: {why}", path.display());
            }
        }
        let grid = extract(encoder, image, spec)?;
        write_entry(&path, &grid, &hash)?;
        Ok(path)
    }

    /// Reads a cached grid if a valid entry exists.
    pub fn lookup(&self, image: &RgbImage, encoder_id: &str, spec: &GeometrySpec) -> Option<TokenGrid> {
        let hash = content_hash(image);
        let path = self.entry_path(&hash, encoder_id, spec);
        match read_entry(&path, &hash, encoder_id, spec) {
            Lookup::Hit(grid) => Some(grid),
            _ => None,
        }
    }
}

/// Reads one cache entry without checking what it was computed from.
pub fn read_grid(path: &Path) -> Result<TokenGrid> {
    let bytes = fs::read(path)?;
    let (header, payload) = parse(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })?;
    TokenGrid::new(payload, header.dim, header.spec, header.encoder_id)
}

/// Grids stored as cache entries, loaded one at a time.
#[derive(Debug, Clone, Default)]
pub struct CachedGrids {
    pub paths: Vec<PathBuf>,
}

impl crate::pca::GridSource for CachedGrids {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn grid(&self, index: usize) -> Result<std::borrow::Cow<'_, TokenGrid>> {
        read_grid(&self.paths[index]).map(std::borrow::Cow::Owned)
    }
}

fn read_entry(path: &Path, hash: &str, encoder_id: &str, spec: &GeometrySpec) -> Lookup {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(_) => return Lookup::Miss,
    };
    let (header, payload) = match parse(&bytes) {
        Ok(parsed) => parsed,
        Err(why) => return Lookup::Corrupt(why),
    };
    if header.encoder_id != encoder_id || header.content_hash != hash || header.spec != *spec {
        return Lookup::Miss;
    }
    match TokenGrid::new(payload, header.dim, header.spec, header.encoder_id) {
        Ok(grid) => Lookup::Hit(grid),
        Err(e) => Lookup::Corrupt(e.to_string()),
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<(Header, Vec<f32>), String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err("truncated header".into());
    }
    let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| e.to_string())?;
    let payload = &body[header_len..];
    let expected = header.rows * header.cols * header.dim * 4;
    if payload.len() != expected {
        return Err(format!("payload is {} bytes, expected {expected}", payload.len()));
    }
    let floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, floats))
}

fn write_entry(path: &Path, grid: &TokenGrid, hash: &str) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        rows: grid.rows(),
        cols: grid.cols(),
        dim: grid.dim(),
        encoder_id: grid.encoder_id().to_string(),
        content_hash: hash.to_string(),
        spec: *grid.spec(),
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for v in grid.features() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
