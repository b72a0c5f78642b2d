//! Pixel tensors and the handful of geometric/photometric operations the
//! augmentation policies are built from.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image, row-major HWC, channel values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

pub const CHANNELS: usize = 3;

/// Per-channel statistics used by the normalisation step.
pub const NORM_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.pixels[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Fills the half-open rectangle `[y0, y1) x [x0, x1)`, clipped to the image.
    pub fn fill_rect(&mut self, y0: usize, y1: usize, x0: usize, x1: usize, rgb: [f64; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set(y, x, rgb);
            }
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * CHANNELS;
                let dst = (y * self.width + x) * CHANNELS;
                out.pixels[dst..dst + CHANNELS].copy_from_slice(&self.pixels[src..src + CHANNELS]);
            }
        }
        out
    }

    /// Bilinear resample of the crop box `(top, left, h, w)` (fractional
    /// pixel units) onto an `out_h x out_w` grid.
    pub fn crop_resize(&self, top: f64, left: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::filled(out_h, out_w, [0.0; 3]);
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        for oy in 0..out_h {
            let fy = (top + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = (left + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let mut rgb = [0.0; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let top_v = self.at(y0, x0, c) * (1.0 - wx) + self.at(y0, x1, c) * wx;
                    let bot_v = self.at(y1, x0, c) * (1.0 - wx) + self.at(y1, x1, c) * wx;
                    *v = top_v * (1.0 - wy) + bot_v * wy;
                }
                out.set(oy, ox, rgb);
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.height as f64, self.width as f64, out_h, out_w)
    }

    pub fn luma(&self, y: usize, x: usize) -> f64 {
        0.299 * self.at(y, x, 0) + 0.587 * self.at(y, x, 1) + 0.114 * self.at(y, x, 2)
    }

    pub fn grayscale(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let l = self.luma(y, x);
                out.set(y, x, [l, l, l]);
            }
        }
        out
    }

    /// Per-channel `(v - mean) / std`.
    pub fn normalized(&self) -> Image {
        let mut out = self.clone();
        for px in out.pixels.chunks_exact_mut(CHANNELS) {
            for c in 0..CHANNELS {
                px[c] = (px[c] - NORM_MEAN[c]) / NORM_STD[c];
            }
        }
        out
    }

    /// Decodes any PNG/PNM file into `[0, 1]` RGB.
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Image("pixel buffer size mismatch".into()))?;
        buf.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Source of decoded pixels for path-based image references.
pub trait ImageLoader {
    fn load(&self, path: &Path) -> Result<Image>;
}

/// Default loader backed by the `image` crate.
#[derive(Debug, Default, Clone, Copy)]
pub struct FileImageLoader;

impl ImageLoader for FileImageLoader {
    fn load(&self, path: &Path) -> Result<Image> {
        Image::load(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let pixels = (0..h * w * 3).map(|i| (i % 97) as f64 / 97.0).collect();
        Image::new(h, w, pixels).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(5, 4);
        assert_eq!(img.hflip().hflip(), img);
        assert_ne!(img.hflip(), img);
    }

    #[test]
    fn full_crop_resize_is_identity() {
        let img = ramp(8, 6);
        let out = img.crop_resize(0.0, 0.0, 8.0, 6.0, 8, 6);
        for (a, b) in img.pixels.iter().zip(&out.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_buffer_length() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
    }

    #[test]
    fn png_round_trip_quantises_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::filled(3, 2, [1.0, 0.0, 0.5]);
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        assert_eq!((back.height, back.width), (3, 2));
        assert!((back.at(1, 1, 2) - 128.0 / 255.0).abs() < 1e-12);
    }
}
