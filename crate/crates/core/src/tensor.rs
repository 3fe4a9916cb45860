//! Batched image tensor in the normalized pixel range.

use ndarray::{Array4, Zip};

use crate::error::{Error, Result};

/// Lower bound of the normalized pixel range.
pub const PIXEL_MIN: f64 = -1.0;
/// Upper bound of the normalized pixel range.
pub const PIXEL_MAX: f64 = 1.0;
/// Dynamic range of the normalized pixel scale (used by PSNR/SSIM).
pub const PIXEL_RANGE: f64 = PIXEL_MAX - PIXEL_MIN;

/// A batch of 3-channel images, layout `[batch, 3, height, width]`,
/// pixels in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array4<f64>,
}

impl ImageTensor {
    /// Wraps raw data after validating shape, finiteness and range.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[1] != 3 {
            return Err(Error::config(format!(
                "image tensor must have 3 channels, got {}",
                data.shape()[1]
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::numeric("image tensor contains non-finite values"));
            }
            if !(PIXEL_MIN..=PIXEL_MAX).contains(&v) {
                return Err(Error::config(format!(
                    "pixel value {v} outside [{PIXEL_MIN}, {PIXEL_MAX}]"
                )));
            }
        }
        Ok(ImageTensor { data })
    }

    /// Wraps raw data, clamping every value into the pixel range.
    pub fn from_clamped(mut data: Array4<f64>) -> Self {
        data.mapv_inplace(|v| v.clamp(PIXEL_MIN, PIXEL_MAX));
        ImageTensor { data }
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// All-zero (mid-gray) batch.
    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            data: Array4::zeros((batch, 3, height, width)),
        }
    }

    /// Maximum absolute pixel difference to another batch.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        let mut m = 0.0f64;
        Zip::from(&self.data).and(&other.data).for_each(|a, b| {
            let d = (a - b).abs();
            if d > m {
                m = d;
            }
        });
        m
    }

    /// Converts one batch entry to an 8-bit RGB image.
    pub fn to_rgb8(&self, index: usize) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| {
                    let v = (self.data[[index, c, y, x]] - PIXEL_MIN) / PIXEL_RANGE;
                    (v * 255.0).round().clamp(0.0, 255.0) as u8
                };
                img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        img
    }

    /// Builds a single-image batch from an 8-bit RGB image.
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array4::zeros((1, 3, h as usize, w as usize));
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x, y);
                for c in 0..3 {
                    data[[0, c, y as usize, x as usize]] =
                        p.0[c] as f64 / 255.0 * PIXEL_RANGE + PIXEL_MIN;
                }
            }
        }
        ImageTensor { data }
    }
}
