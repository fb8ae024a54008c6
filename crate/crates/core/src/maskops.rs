//! Turning a token mask into refiner prompts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::preprocess::{token_box_to_pixel_box, GeometrySpec, TokenBox};
use crate::raster::Mask;

/// Side of the square mask prompt handed to the refiner.
pub const COARSE_SIZE: usize = 256;

/// Default magnitude of the signed confidence map built from a coarse mask.
pub const DEFAULT_MASK_LOGIT: f32 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            _ => Err(Error::invalid(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }
}

/// A maximal connected set of plant tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Component {
    pub id: usize,
    /// Member tokens `(row, col)` in raster order.
    pub cells: Vec<(usize, usize)>,
    pub bbox: TokenBox,
}

/// A box prompt in padded-image pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
    pub source_component: usize,
    pub token_area: usize,
}

impl BoxPrompt {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y_min..=self.y_max).contains(&y) && (self.x_min..=self.x_max).contains(&x)
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }
}

/// Token mask resampled to `COARSE_SIZE x COARSE_SIZE`, covering the padded image.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMask {
    pub values: Mask,
    pub spec: GeometrySpec,
}

impl CoarseMask {
    /// Signed confidence map: `+magnitude` on plant cells, `-magnitude` elsewhere.
    pub fn to_logits(&self, magnitude: f32) -> Vec<f32> {
        self.values
            .as_slice()
            .iter()
            .map(|&v| if v { magnitude } else { -magnitude })
            .collect()
    }

    /// Nearest-neighbor upsampling onto the padded image grid.
    pub fn upsample(&self) -> Mask {
        let (h, w) = self.spec.padded_dims();
        Mask::from_fn(h, w, |y, x| {
            self.values.get(y * COARSE_SIZE / h, x * COARSE_SIZE / w)
        })
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the true cells of `mask`.
///
/// Two-pass union-find labelling. Components with fewer than `min_tokens`
/// cells are dropped; the rest are ordered by the top-left corner of their
/// bounding box, ties broken by first member in raster order, and numbered in
/// that order.
pub fn components(mask: &Mask, connectivity: Connectivity, min_tokens: usize) -> Vec<Component> {
    let (h, w) = mask.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for &(dy, dx) in back {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if mask.get(ny, nx) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny * w + nx);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; h * w];
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let root = find(&mut parent, y * w + x);
            if slot[root] == usize::MAX {
                slot[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[root]].push((y, x));
        }
    }
    let mut out: Vec<Component> = groups
        .into_iter()
        .filter(|cells| cells.len() >= min_tokens.max(1))
        .map(|cells| {
            let mut b = TokenBox {
                row_min: usize::MAX,
                col_min: usize::MAX,
                row_max: 0,
                col_max: 0,
            };
            for &(r, c) in &cells {
                b.row_min = b.row_min.min(r);
                b.col_min = b.col_min.min(c);
                b.row_max = b.row_max.max(r);
                b.col_max = b.col_max.max(c);
            }
            Component {
                id: 0,
                cells,
                bbox: b,
            }
        })
        .collect();
    out.sort_by_key(|c| (c.bbox.row_min, c.bbox.col_min, c.cells[0]));
    for (i, c) in out.iter_mut().enumerate() {
        c.id = i;
    }
    out
}

/// One minimal pixel box per component.
pub fn boxes(components: &[Component], spec: &GeometrySpec) -> Result<Vec<BoxPrompt>> {
    components
        .iter()
        .map(|c| {
            let p = token_box_to_pixel_box(&c.bbox, spec)?;
            Ok(BoxPrompt {
                x_min: p.x_min,
                y_min: p.y_min,
                x_max: p.x_max,
                y_max: p.y_max,
                source_component: c.id,
                token_area: c.cells.len(),
            })
        })
        .collect()
}

/// A single box around every component, for the one-box ablation.
pub fn single_box(components: &[Component], spec: &GeometrySpec) -> Result<Option<BoxPrompt>> {
    let Some(first) = components.first() else {
        return Ok(None);
    };
    let mut b = first.bbox;
    for c in &components[1..] {
        b.row_min = b.row_min.min(c.bbox.row_min);
        b.col_min = b.col_min.min(c.bbox.col_min);
        b.row_max = b.row_max.max(c.bbox.row_max);
        b.col_max = b.col_max.max(c.bbox.col_max);
    }
    let p = token_box_to_pixel_box(&b, spec)?;
    Ok(Some(BoxPrompt {
        x_min: p.x_min,
        y_min: p.y_min,
        x_max: p.x_max,
        y_max: p.y_max,
        source_component: 0,
        token_area: components.iter().map(|c| c.cells.len()).sum(),
    }))
}

/// Rows of an `n`-long axis covered by output cell `i` of a `COARSE_SIZE` axis.
///
/// Cell `i` spans `[i*n/S, (i+1)*n/S)` in token units; every token that
/// overlaps that span with positive length is covered.
#[inline]
fn covered(i: usize, n: usize) -> std::ops::Range<usize> {
    let start = i * n / COARSE_SIZE;
    let end = ((i + 1) * n).div_ceil(COARSE_SIZE);
    start..end.min(n)
}

/// Max-pooling resample of a token mask to `COARSE_SIZE x COARSE_SIZE`: a cell is
/// set when any token it covers is set, so small plants are never erased.
pub fn coarse_mask(tokens: &Mask, spec: &GeometrySpec) -> Result<CoarseMask> {
    if tokens.dims() != spec.token_dims() {
        return Err(Error::DimensionMismatch {
            expected: spec.token_dims(),
            found: tokens.dims(),
        });
    }
    let (rows, cols) = tokens.dims();
    let row_spans: Vec<_> = (0..COARSE_SIZE).map(|i| covered(i, rows)).collect();
    let col_spans: Vec<_> = (0..COARSE_SIZE).map(|j| covered(j, cols)).collect();
    let values = Mask::from_fn(COARSE_SIZE, COARSE_SIZE, |i, j| {
        row_spans[i]
            .clone()
            .any(|r| col_spans[j].clone().any(|c| tokens.get(r, c)))
    });
    Ok(CoarseMask { values, spec: *spec })
}

/// Pixelwise OR; an empty list yields an all-false raster of `dims`.
pub fn union(masks: &[Mask], dims: (usize, usize)) -> Result<Mask> {
    let mut out = Mask::new(dims.0, dims.1);
    for m in masks {
        if m.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: m.dims(),
            });
        }
        out.as_mut_slice()
            .iter_mut()
            .zip(m.as_slice())
            .for_each(|(o, &v)| *o |= v);
    }
    Ok(out)
}

/// Per-image debug record: the token label raster (0 = background, `k + 1`
/// for component `k`) and the box prompts derived from it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DebugDump {
    pub image_id: String,
    pub token_rows: usize,
    pub token_cols: usize,
    pub labels: Vec<u32>,
    pub boxes: Vec<BoxPrompt>,
}

impl DebugDump {
    pub fn new(image_id: &str, spec: &GeometrySpec, components: &[Component], boxes: &[BoxPrompt]) -> Self {
        let (rows, cols) = spec.token_dims();
        let mut labels = vec![0u32; rows * cols];
        for c in components {
            for &(r, col) in &c.cells {
                labels[r * cols + col] = c.id as u32 + 1;
            }
        }
        Self {
            image_id: image_id.to_string(),
            token_rows: rows,
            token_cols: cols,
            labels,
            boxes: boxes.to_vec(),
        }
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }
}
