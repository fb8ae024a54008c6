//! Image geometry: shortest-edge cap, patch-aligned padding, and the coordinate
//! maps between original pixels, padded pixels and the token grid.
//!
//! Images whose shortest edge exceeds [`MAX_SHORT_EDGE`] are downscaled with
//! bilinear resampling, preserving aspect ratio. Images are never upscaled.
//! Padding is zero-valued and added on the bottom and right only, so token
//! `(0, 0)` always starts at pixel `(0, 0)`.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{check_dims, Mask};

/// Side length of one transformer patch in pixels.
pub const PATCH: usize = 14;

/// Native training resolution of the base encoder.
pub const BASE_TRAIN_SIZE: usize = 518;

/// Cap on the shortest image edge: twice the base training size.
pub const MAX_SHORT_EDGE: usize = 2 * BASE_TRAIN_SIZE;

/// Resize and pad arithmetic linking an original image, its padded version and
/// the token grid the encoder produces for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub orig_h: usize,
    pub orig_w: usize,
    pub scale: f64,
    pub resized_h: usize,
    pub resized_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub patch: usize,
    pub token_rows: usize,
    pub token_cols: usize,
}

/// Inclusive rectangle on the token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl TokenBox {
    pub fn single(row: usize, col: usize) -> Self {
        Self {
            row_min: row,
            col_min: col,
            row_max: row,
            col_max: col,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.row_min > self.row_max || self.col_min > self.col_max
    }

    pub fn area(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
        }
    }
}

/// Inclusive pixel rectangle `(x_min, y_min, x_max, y_max)` in padded-image space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y_min..=self.y_max).contains(&y) && (self.x_min..=self.x_max).contains(&x)
    }
}

#[inline]
fn round_up_to(value: usize, multiple: usize) -> usize {
    value.div_ceil(multiple) * multiple
}

/// Plans the resize and padding for an `orig_h x orig_w` image.
pub fn plan_geometry(orig_h: usize, orig_w: usize) -> Result<GeometrySpec> {
    plan_geometry_capped(orig_h, orig_w, MAX_SHORT_EDGE)
}

/// [`plan_geometry`] with a custom cap on the shortest edge.
pub fn plan_geometry_capped(orig_h: usize, orig_w: usize, max_short_edge: usize) -> Result<GeometrySpec> {
    if max_short_edge < PATCH {
        return Err(Error::invalid(format!("short-edge cap {max_short_edge} is below the patch size")));
    }
    if orig_h < PATCH || orig_w < PATCH {
        return Err(Error::TooSmall {
            height: orig_h,
            width: orig_w,
            patch: PATCH,
        });
    }
    let short = orig_h.min(orig_w);
    let (scale, resized_h, resized_w) = if short > max_short_edge {
        // round-half-up of edge * cap / short, in exact integer arithmetic
        let resize = |edge: usize| (2 * edge * max_short_edge + short) / (2 * short);
        (
            max_short_edge as f64 / short as f64,
            resize(orig_h),
            resize(orig_w),
        )
    } else {
        (1.0, orig_h, orig_w)
    };
    let padded_h = round_up_to(resized_h, PATCH);
    let padded_w = round_up_to(resized_w, PATCH);
    Ok(GeometrySpec {
        orig_h,
        orig_w,
        scale,
        resized_h,
        resized_w,
        padded_h,
        padded_w,
        pad_bottom: padded_h - resized_h,
        pad_right: padded_w - resized_w,
        patch: PATCH,
        token_rows: padded_h / PATCH,
        token_cols: padded_w / PATCH,
    })
}

impl GeometrySpec {
    pub fn is_resized(&self) -> bool {
        self.resized_h != self.orig_h || self.resized_w != self.orig_w
    }

    pub fn token_dims(&self) -> (usize, usize) {
        (self.token_rows, self.token_cols)
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (self.padded_h, self.padded_w)
    }

    pub fn orig_dims(&self) -> (usize, usize) {
        (self.orig_h, self.orig_w)
    }

    /// Token containing padded-space pixel `(y, x)`.
    #[inline]
    pub fn pixel_to_token(&self, y: usize, x: usize) -> (usize, usize) {
        (y / self.patch, x / self.patch)
    }

    /// A token is padding when its pixel block holds no content pixel.
    #[inline]
    pub fn is_pad_token(&self, row: usize, col: usize) -> bool {
        row * self.patch >= self.resized_h || col * self.patch >= self.resized_w
    }

    /// Number of tokens whose block intersects the content region.
    pub fn content_token_count(&self) -> usize {
        self.resized_h.div_ceil(self.patch) * self.resized_w.div_ceil(self.patch)
    }

    /// Row-major pad flags for the whole grid.
    pub fn pad_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.token_rows * self.token_cols);
        for r in 0..self.token_rows {
            for c in 0..self.token_cols {
                out.push(self.is_pad_token(r, c));
            }
        }
        out
    }
}

/// Resizes (when planned) and zero-pads `image` according to `spec`.
pub fn apply_geometry(image: &RgbImage, spec: &GeometrySpec) -> Result<RgbImage> {
    check_dims(image, (spec.orig_h, spec.orig_w))?;
    let resized;
    let content = if spec.is_resized() {
        resized = resize_bilinear(image, spec.resized_h, spec.resized_w);
        &resized
    } else {
        image
    };
    if spec.pad_bottom == 0 && spec.pad_right == 0 {
        return Ok(content.clone());
    }
    let mut out = RgbImage::new(spec.padded_w as u32, spec.padded_h as u32);
    for (x, y, px) in content.enumerate_pixels() {
        out.put_pixel(x, y, *px);
    }
    Ok(out)
}

/// Bilinear resampling with half-pixel centers and clamped borders.
pub fn resize_bilinear(image: &RgbImage, out_h: usize, out_w: usize) -> RgbImage {
    let (in_w, in_h) = (image.width() as usize, image.height() as usize);
    let axis = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let ratio = input as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let src = image.as_raw();
    let at = |y: usize, x: usize, ch: usize| src[(y * in_w + x) * 3 + ch] as f64;
    let mut out = RgbImage::new(out_w as u32, out_h as u32);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let mut px = [0u8; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                *v = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox as u32, oy as u32, Rgb(px));
        }
    }
    out
}

/// Maps a mask at padded or token resolution back to the original image size.
///
/// Token masks are first block-expanded to padded resolution, padding is then
/// cropped and the content is nearest-neighbor resampled to `(orig_h, orig_w)`.
pub fn restore_mask(mask: &Mask, spec: &GeometrySpec) -> Result<Mask> {
    let expanded;
    let padded = if mask.dims() == spec.padded_dims() {
        mask
    } else if mask.dims() == spec.token_dims() {
        expanded = Mask::from_fn(spec.padded_h, spec.padded_w, |y, x| {
            mask.get(y / spec.patch, x / spec.patch)
        });
        &expanded
    } else {
        return Err(Error::UnrecognizedResolution {
            height: mask.height(),
            width: mask.width(),
        });
    };
    let near = |out: usize, src: usize| -> Vec<usize> {
        (0..out)
            .map(|i| (((2 * i + 1) * src) / (2 * out)).min(src - 1))
            .collect()
    };
    let ys = near(spec.orig_h, spec.resized_h);
    let xs = near(spec.orig_w, spec.resized_w);
    Ok(Mask::from_fn(spec.orig_h, spec.orig_w, |y, x| {
        padded.get(ys[y], xs[x])
    }))
}

/// Converts an inclusive token rectangle into a padded-space pixel rectangle,
/// clipped to the resized content region.
pub fn token_box_to_pixel_box(b: &TokenBox, spec: &GeometrySpec) -> Result<PixelBox> {
    if b.is_empty() {
        return Err(Error::InvalidBox(format!("{b:?} is empty")));
    }
    if b.row_max >= spec.token_rows || b.col_max >= spec.token_cols {
        return Err(Error::InvalidBox(format!(
            "{b:?} exceeds the {}x{} token grid",
            spec.token_rows, spec.token_cols
        )));
    }
    let p = spec.patch;
    let x_min = p * b.col_min;
    let y_min = p * b.row_min;
    if x_min >= spec.resized_w || y_min >= spec.resized_h {
        return Err(Error::InvalidBox(format!("{b:?} covers only padding")));
    }
    Ok(PixelBox {
        x_min,
        y_min,
        x_max: (p * (b.col_max + 1) - 1).min(spec.resized_w - 1),
        y_max: (p * (b.row_max + 1) - 1).min(spec.resized_h - 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(s: &GeometrySpec) -> [usize; 8] {
        [
            s.resized_h,
            s.resized_w,
            s.padded_h,
            s.padded_w,
            s.token_rows,
            s.token_cols,
            s.pad_bottom,
            s.pad_right,
        ]
    }

    #[test]
    fn plan_without_resize() {
        let s = plan_geometry(1000, 1500).unwrap();
        assert_eq!(s.scale, 1.0);
        assert_eq!(dims(&s), [1000, 1500, 1008, 1512, 72, 108, 8, 12]);
    }

    #[test]
    fn plan_exact_multiple() {
        let s = plan_geometry(1036, 1036).unwrap();
        assert_eq!(s.scale, 1.0);
        assert_eq!((s.padded_h, s.padded_w), (1036, 1036));
        assert_eq!(s.token_dims(), (74, 74));
    }

    #[test]
    fn plan_halving() {
        // 1036 / 2072 = 0.5; 3000 * 0.5 = 1500 -> padded to 108 * 14
        let s = plan_geometry(2072, 3000).unwrap();
        assert_eq!(s.scale, 0.5);
        assert_eq!(dims(&s), [1036, 1500, 1036, 1512, 74, 108, 0, 12]);
    }

    #[test]
    fn plan_rejects_sub_patch() {
        assert!(matches!(
            plan_geometry(13, 400),
            Err(Error::TooSmall { .. })
        ));
        assert!(plan_geometry(400, 0).is_err());
    }

    #[test]
    fn apply_identity() {
        let img = RgbImage::from_fn(42, 28, |x, y| Rgb([x as u8, y as u8, (x + y) as u8]));
        let s = plan_geometry(28, 42).unwrap();
        assert_eq!(apply_geometry(&img, &s).unwrap(), img);
    }

    #[test]
    fn apply_pads_with_zeros() {
        let img = RgbImage::from_pixel(1500, 1000, Rgb([200, 100, 50]));
        let s = plan_geometry(1000, 1500).unwrap();
        let out = apply_geometry(&img, &s).unwrap();
        assert_eq!(out.dimensions(), (1512, 1008));
        for (x, y, px) in out.enumerate_pixels() {
            let content = y < 1000 && x < 1500;
            assert_eq!(*px == Rgb([200, 100, 50]), content, "({y},{x})");
            if !content {
                assert_eq!(*px, Rgb([0, 0, 0]));
            }
        }
    }

    #[test]
    fn apply_rejects_mismatch() {
        let img = RgbImage::new(30, 20);
        let s = plan_geometry(28, 28).unwrap();
        assert!(matches!(
            apply_geometry(&img, &s),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn restore_single_token_block() {
        let s = plan_geometry(70, 84).unwrap();
        let mut m = Mask::new(5, 6);
        m.set(2, 3, true);
        let out = restore_mask(&m, &s).unwrap();
        assert_eq!(out.dims(), (70, 84));
        for y in 0..70 {
            for x in 0..84 {
                let inside = (28..42).contains(&y) && (42..56).contains(&x);
                assert_eq!(out.get(y, x), inside);
            }
        }
    }

    #[test]
    fn restore_rejects_odd_resolution() {
        let s = plan_geometry(70, 84).unwrap();
        assert!(matches!(
            restore_mask(&Mask::new(6, 6), &s),
            Err(Error::UnrecognizedResolution { .. })
        ));
    }

    #[test]
    fn token_boxes() {
        let s = plan_geometry(140, 140).unwrap();
        let b = TokenBox {
            row_min: 2,
            col_min: 3,
            row_max: 4,
            col_max: 5,
        };
        assert_eq!(
            token_box_to_pixel_box(&b, &s).unwrap(),
            PixelBox {
                x_min: 42,
                y_min: 28,
                x_max: 83,
                y_max: 69
            }
        );
        assert_eq!(
            token_box_to_pixel_box(&TokenBox::single(0, 0), &s).unwrap(),
            PixelBox {
                x_min: 0,
                y_min: 0,
                x_max: 13,
                y_max: 13
            }
        );
        let empty = TokenBox {
            row_min: 3,
            col_min: 0,
            row_max: 2,
            col_max: 0,
        };
        assert!(matches!(
            token_box_to_pixel_box(&empty, &s),
            Err(Error::InvalidBox(_))
        ));
    }

    #[test]
    fn token_box_clipped_to_content() {
        // 134 wide -> padded 140, pad_right = 6
        let s = plan_geometry(100, 134).unwrap();
        assert_eq!(s.pad_right, 6);
        let b = TokenBox {
            row_min: 0,
            col_min: 8,
            row_max: 7,
            col_max: 9,
        };
        let p = token_box_to_pixel_box(&b, &s).unwrap();
        assert_eq!(p.x_max, 133);
        assert_eq!(p.y_max, 99);
    }

    proptest! {
        #[test]
        fn plan_invariants(h in 14usize..5000, w in 14usize..5000) {
            let s = plan_geometry(h, w).unwrap();
            prop_assert_eq!(s.padded_h % PATCH, 0);
            prop_assert_eq!(s.padded_w % PATCH, 0);
            prop_assert!(s.resized_h.min(s.resized_w) <= MAX_SHORT_EDGE);
            prop_assert!(s.pad_bottom < PATCH && s.pad_right < PATCH);
            if h.min(w) <= MAX_SHORT_EDGE {
                prop_assert_eq!(s.scale, 1.0);
            } else {
                prop_assert_eq!(s.resized_h.min(s.resized_w), MAX_SHORT_EDGE);
            }
            // re-planning on the padded size is a no-op
            let again = plan_geometry(s.padded_h, s.padded_w).unwrap();
            prop_assert_eq!(again.scale, 1.0);
            prop_assert_eq!(again.pad_bottom + again.pad_right, 0);
        }

        #[test]
        fn restore_constant_masks(h in 14usize..300, w in 14usize..300, v: bool) {
            let s = plan_geometry(h, w).unwrap();
            let out = restore_mask(&Mask::filled(s.token_rows, s.token_cols, v), &s).unwrap();
            prop_assert_eq!(out, Mask::filled(h, w, v));
        }

        #[test]
        fn box_area_is_196_per_token(r0 in 0usize..20, c0 in 0usize..20, dr in 0usize..10, dc in 0usize..10) {
            let s = plan_geometry(420, 420).unwrap();
            let b = TokenBox { row_min: r0, col_min: c0, row_max: r0 + dr, col_max: c0 + dc };
            let p = token_box_to_pixel_box(&b, &s).unwrap();
            prop_assert_eq!(p.area(), 196 * b.area());
        }
    }
}
