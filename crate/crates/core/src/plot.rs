//! Small raster plots. Axes and marks only; values go to the CSV next to
//! each figure.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::baseline::CurvePoint;
use crate::error::Result;
use crate::pca::Histogram;

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const BLUE: Rgb<u8> = Rgb([45, 95, 180]);
const LIGHT_BLUE: Rgb<u8> = Rgb([190, 210, 240]);
const RED: Rgb<u8> = Rgb([200, 40, 40]);
const GREEN: Rgb<u8> = Rgb([60, 150, 60]);
const GRAY: Rgb<u8> = Rgb([160, 160, 160]);

struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(W, H, WHITE);
        for x in MARGIN..W - MARGIN / 2 {
            img.put_pixel(x, H - MARGIN, BLACK);
        }
        for y in MARGIN / 2..=H - MARGIN {
            img.put_pixel(MARGIN, y, BLACK);
        }
        Self { img, x_range, y_range }
    }

    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        MARGIN as f64 + (x - lo) / (hi - lo).max(f64::EPSILON) * (W - MARGIN - MARGIN / 2) as f64
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        (H - MARGIN) as f64 - (y - lo) / (hi - lo).max(f64::EPSILON) * (H - MARGIN - MARGIN / 2) as f64
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn fill(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
        let (xa, xb) = (x0.min(x1).round() as i64, x0.max(x1).round() as i64);
        let (ya, yb) = (y0.min(y1).round() as i64, y0.max(y1).round() as i64);
        for y in ya..=yb {
            for x in xa..=xb {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            self.put(x.round() as i64, y.round() as i64, c);
        }
    }

    fn dashed_hline(&mut self, y: f64, c: Rgb<u8>) {
        let yy = y.round() as i64;
        for x in MARGIN as i64..(W - MARGIN / 2) as i64 {
            if (x / 6) % 2 == 0 {
                self.put(x, yy, c);
                self.put(x, yy + 1, c);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

/// Bar chart of a score histogram with a vertical marker at 0.
pub fn histogram_png(hist: &Histogram, path: &Path) -> Result<()> {
    let lo = *hist.edges.first().unwrap_or(&-1.0);
    let hi = *hist.edges.last().unwrap_or(&1.0);
    let max = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut c = Canvas::new((lo, hi), (0.0, max * 1.05));
    for (i, &n) in hist.counts.iter().enumerate() {
        let (x0, x1) = (c.px(hist.edges[i]), c.px(hist.edges[i + 1]) - 1.0);
        let color = if hist.edges[i + 1] <= 0.0 { GRAY } else { GREEN };
        if n > 0 {
            let (y0, y1) = (c.py(0.0), c.py(n as f64));
            c.fill(x0, y0, x1.max(x0), y1, color);
        }
    }
    if lo < 0.0 && hi > 0.0 {
        let x = c.px(0.0);
        c.line(x, c.py(0.0), x, c.py(max * 1.05), RED);
    }
    c.save(path)
}

/// Mean IoU per subset size (log2 x axis) with a one-std envelope and a
/// dashed line at the zero-shot mean.
pub fn scaling_png(points: &[CurvePoint], zero_shot: Option<f64>, path: &Path) -> Result<()> {
    let pts: Vec<&CurvePoint> = points.iter().filter(|p| p.repetitions > 0).collect();
    let lx = |s: usize| (s.max(1) as f64).log2();
    let (xmin, xmax) = match (pts.first(), pts.last()) {
        (Some(a), Some(b)) if a.subset_size != b.subset_size => (lx(a.subset_size), lx(b.subset_size)),
        (Some(a), _) => (lx(a.subset_size) - 1.0, lx(a.subset_size) + 1.0),
        _ => (0.0, 1.0),
    };
    let pad = 0.05 * (xmax - xmin);
    let mut c = Canvas::new((xmin - pad, xmax + pad), (0.0, 1.0));
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (xa, xb) = (c.px(lx(a.subset_size)), c.px(lx(b.subset_size)));
        let steps = (xb - xa).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let m = a.mean_iou + t * (b.mean_iou - a.mean_iou);
            let s = a.std_iou + t * (b.std_iou - a.std_iou);
            let x = xa + t * (xb - xa);
            c.line(x, c.py((m - s).max(0.0)), x, c.py((m + s).min(1.0)), LIGHT_BLUE);
        }
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        c.line(
            c.px(lx(a.subset_size)),
            c.py(a.mean_iou),
            c.px(lx(b.subset_size)),
            c.py(b.mean_iou),
            BLUE,
        );
    }
    for p in &pts {
        let (x, y) = (c.px(lx(p.subset_size)), c.py(p.mean_iou));
        c.fill(x - 3.0, y - 3.0, x + 3.0, y + 3.0, BLUE);
    }
    if let Some(z) = zero_shot {
        let y = c.py(z.clamp(0.0, 1.0));
        c.dashed_hline(y, RED);
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let hist = Histogram {
            edges: vec![-1.0, 0.0, 1.0],
            counts: vec![3, 5],
        };
        histogram_png(&hist, &dir.path().join("h.png")).unwrap();
        let p = |s, m| CurvePoint {
            subset_size: s,
            repetitions: 2,
            mean_iou: m,
            std_iou: 0.1,
            ious: vec![m - 0.1, m + 0.1],
            failed: 0,
        };
        let path = dir.path().join("s.png");
        scaling_png(&[p(2, 0.3), p(8, 0.6), p(64, 0.9)], Some(0.7), &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (W, H));
        assert!(img.pixels().any(|px| *px == RED));
        assert!(img.pixels().any(|px| *px == BLUE));
    }
}
