//! Floating point RGB images and binary coverage masks.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{BBox, Rgb};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: {what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        what: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("image must have nonzero width and height")]
    Empty,
    #[error("png {path}: {message}")]
    Png { path: String, message: String },
}

/// `height x width` RGB grid, row-major. Also used for per-pixel gradients,
/// whose values are not restricted to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    pixels: Vec<Rgb<T>>,
}

pub type ImageGrad<T> = Image<T>;

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, fill: Rgb<T>) -> Self {
        Image {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self::new(width, height, Rgb::black())
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb<T>>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::DimensionMismatch {
                what: "pixel buffer".into(),
                got_w: pixels.len(),
                got_h: 1,
                want_w: width,
                want_h: height,
            });
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Rgb<T>) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb<T>] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb<T>] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb<T> {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb<T>) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|c| c.in_unit_range())
    }

    pub fn ensure_dims(&self, what: &str, width: usize, height: usize) -> Result<(), ImageError> {
        if self.dims() != (width, height) {
            return Err(ImageError::DimensionMismatch {
                what: what.into(),
                got_w: self.width,
                got_h: self.height,
                want_w: width,
                want_h: height,
            });
        }
        Ok(())
    }

    /// 8-bit RGB bytes; values are clamped to `[0, 1]` and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let q = |v: T| (v.clamp01().to_f64_lossy() * 255.0).round() as u8;
        self.pixels
            .iter()
            .flat_map(|c| [q(c.r), q(c.g), q(c.b)])
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        let pixels = bytes
            .chunks_exact(3)
            .map(|p| {
                Rgb::new(
                    T::lit(f64::from(p[0]) / 255.0),
                    T::lit(f64::from(p[1]) / 255.0),
                    T::lit(f64::from(p[2]) / 255.0),
                )
            })
            .collect();
        Self::from_pixels(width, height, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let png_err = |e: image::ImageError| ImageError::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(png_err)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| ImageError::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Self::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }
}

/// Binary foreground coverage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            bits,
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask buffer size");
        Mask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Tight pixel-aligned box around the covered pixels, `None` when empty.
    pub fn bounding_box<T: Scalar>(&self) -> Option<BBox<T>> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bounds.map(|(x0, y0, x1, y1)| {
            BBox::new(
                T::from_usize_lossy(x0),
                T::from_usize_lossy(y0),
                T::from_usize_lossy(x1 + 1),
                T::from_usize_lossy(y1 + 1),
            )
        })
    }

    /// Number of covered pixels whose centers fall inside `b`.
    pub fn count_inside<T: Scalar>(&self, b: &BBox<T>) -> usize {
        let half = T::lit(0.5);
        let mut n = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                let cx = T::from_usize_lossy(x) + half;
                let cy = T::from_usize_lossy(y) + half;
                if self.get(x, y) && cx > b.x0 && cx < b.x1 && cy > b.y0 && cy < b.y1 {
                    n += 1;
                }
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Image::<f64>::from_fn(3, 2, |x, y| Rgb::new(x as f64 / 2.0, y as f64, 0.25));
        img.save_png(&path).unwrap();
        let back = Image::<f64>::load_png(&path).unwrap();
        assert_eq!(back.dims(), (3, 2));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for c in 0..3 {
                assert!((a.channel(c) - b.channel(c)).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn bounding_box_is_tight() {
        let m = Mask::from_fn(10, 8, |x, y| (2..5).contains(&x) && (3..7).contains(&y));
        let b: BBox<f64> = m.bounding_box().unwrap();
        assert_eq!(b, BBox::new(2.0, 3.0, 5.0, 7.0));
        assert_eq!(m.count_inside(&b), m.count());
        assert!(Mask::empty(4, 4).bounding_box::<f64>().is_none());
    }
}
