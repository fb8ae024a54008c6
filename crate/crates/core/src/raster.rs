//! Binary masks and small raster helpers shared by every stage.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};

use crate::error::{Error, Result};

/// Row-major binary raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("count", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "mask buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Sets every pixel of the inclusive rectangle.
    pub fn fill_rect(&mut self, y_min: usize, x_min: usize, y_max: usize, x_max: usize) {
        for y in y_min..=y_max.min(self.height - 1) {
            let row = y * self.width;
            for x in x_min..=x_max.min(self.width - 1) {
                self.data[row + x] = true;
            }
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Any nonzero pixel counts as foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&v| v != 0).collect(),
        }
    }

    /// Writes a single-channel 0/255 PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_gray(&image::open(path)?.to_luma8()))
    }
}

/// Excess-green index `2G - R - B` of one pixel.
#[inline]
pub fn excess_green(px: &image::Rgb<u8>) -> f64 {
    2.0 * px[1] as f64 - px[0] as f64 - px[2] as f64
}

pub(crate) fn check_dims(image: &RgbImage, expected: (usize, usize)) -> Result<()> {
    let found = (image.height() as usize, image.width() as usize);
    if found != expected {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
