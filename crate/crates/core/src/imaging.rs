//! Planar RGB images with `f64` samples in `[0, 1]`.
//!
//! Every stage of the pipeline works on [`Image`]; decoding and encoding go
//! through the `image` crate and always produce 8-bit RGB on disk.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use thiserror::Error;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("cannot encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
}

/// A three-channel image stored channel-major (`[c][y][x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for value in rgb {
            data.extend(std::iter::repeat_n(value, plane));
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Wraps planar data. Panics if the length is not `3 * width * height`.
    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * width * height, "planar buffer size");
        Self {
            width,
            height,
            data,
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// BT.601 luma, row-major.
    pub fn luma(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        (0..plane)
            .map(|i| {
                LUMA_WEIGHTS[0] * self.data[i]
                    + LUMA_WEIGHTS[1] * self.data[plane + i]
                    + LUMA_WEIGHTS[2] * self.data[2 * plane + i]
            })
            .collect()
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(w, h, |c, y, x| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| quantize_u8(self.get(c, y as usize, x as usize));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn open(path: &Path) -> Result<Self, ImagingError> {
        let decoded = image::open(path).map_err(|e| ImagingError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        if rgb.width() == 0 || rgb.height() == 0 {
            return Err(ImagingError::EmptyImage {
                width: rgb.width() as usize,
                height: rgb.height() as usize,
            });
        }
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<Self, ImagingError> {
        let decoded = image::load_from_memory(bytes).map_err(|e| ImagingError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&decoded.to_rgb8()))
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ImagingError::Encode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    /// Bilinear resize through the 8-bit representation. A no-op when the
    /// size already matches.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let rgb = image::imageops::resize(
            &self.to_rgb8(),
            width as u32,
            height as u32,
            FilterType::Triangle,
        );
        Self::from_rgb8(&rgb)
    }
}

/// Round-half-up quantization of a `[0, 1]` sample to 8 bits.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_indexing() {
        let img = Image::from_fn(3, 2, |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(img.get(2, 1, 2), 212.0);
        assert_eq!(img.data().len(), 18);
    }

    #[test]
    fn rgb8_roundtrip_is_exact_for_quantized_values() {
        let img = Image::from_fn(4, 4, |c, y, x| ((c + y * 4 + x) * 7 % 256) as f64 / 255.0);
        assert_eq!(Image::from_rgb8(&img.to_rgb8()), img);
    }

    #[test]
    fn luma_of_white_is_one() {
        let img = Image::filled(2, 2, [1.0, 1.0, 1.0]);
        for v in img.luma() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
