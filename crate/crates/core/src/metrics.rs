//! Evaluation metrics: bit accuracy, PSNR over channel selections, SSIM.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::BitMessage;
use crate::color::{apply_matrix, RGB_TO_YUV};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, PIXEL_RANGE};

/// Percentage of matching bits between two equal-length messages.
pub fn bit_accuracy(a: &BitMessage, b: &BitMessage) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "bit accuracy needs equal lengths, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let matching = a
        .bits()
        .iter()
        .zip(b.bits().iter())
        .filter(|(x, y)| x == y)
        .count();
    Ok(100.0 * matching as f64 / a.len() as f64)
}

/// Percentage of matching entries between two {0,1}-valued batches.
pub fn bit_accuracy_batch(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let matching = a
        .iter()
        .zip(b.iter())
        .filter(|(x, y)| (**x - **y).abs() < 0.5)
        .count();
    100.0 * matching as f64 / a.len() as f64
}

/// Which plane PSNR is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelSelector {
    Rgb,
    Y,
    U,
    V,
    /// Blue plane of RGB.
    B,
}

fn mse_over<'a>(it: impl Iterator<Item = (&'a f64, &'a f64)>) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (a, b) in it {
        let d = a - b;
        acc += d * d;
        n += 1;
    }
    acc / n as f64
}

/// Peak signal-to-noise ratio in dB over the selected plane; identical
/// images give `f64::INFINITY` (rendered as "inf" in reports).
pub fn psnr(reference: &ImageTensor, test: &ImageTensor, selector: ChannelSelector) -> Result<f64> {
    if reference.data.dim() != test.data.dim() {
        return Err(Error::config("psnr needs equal shapes"));
    }
    let mse = match selector {
        ChannelSelector::Rgb => mse_over(reference.data.iter().zip(test.data.iter())),
        ChannelSelector::B => {
            let a = reference.data.slice(ndarray::s![.., 2, .., ..]);
            let b = test.data.slice(ndarray::s![.., 2, .., ..]);
            mse_over(a.iter().zip(b.iter()))
        }
        ChannelSelector::Y | ChannelSelector::U | ChannelSelector::V => {
            let idx = match selector {
                ChannelSelector::Y => 0,
                ChannelSelector::U => 1,
                _ => 2,
            };
            let ya = apply_matrix(&reference.data, &RGB_TO_YUV);
            let yb = apply_matrix(&test.data, &RGB_TO_YUV);
            let a = ya.slice(ndarray::s![.., idx, .., ..]);
            let b = yb.slice(ndarray::s![.., idx, .., ..]);
            mse_over(a.iter().zip(b.iter()))
        }
    };
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PIXEL_RANGE * PIXEL_RANGE / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dy * dy + dx * dx) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over 11x11 Gaussian-weighted windows (valid
/// positions only), averaged across channels and batch.
pub fn ssim(reference: &ImageTensor, test: &ImageTensor) -> Result<f64> {
    if reference.data.dim() != test.data.dim() {
        return Err(Error::config("ssim needs equal shapes"));
    }
    let (bs, c, h, w) = reference.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * PIXEL_RANGE) * (SSIM_K1 * PIXEL_RANGE);
    let c2 = (SSIM_K2 * PIXEL_RANGE) * (SSIM_K2 * PIXEL_RANGE);
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..bs {
        for ch in 0..c {
            for oy in 0..=(h - SSIM_WINDOW) {
                for ox in 0..=(w - SSIM_WINDOW) {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wt = win[dy * SSIM_WINDOW + dx];
                            mu_a += wt * reference.data[[b, ch, oy + dy, ox + dx]];
                            mu_b += wt * test.data[[b, ch, oy + dy, ox + dx]];
                        }
                    }
                    let mut var_a = 0.0;
                    let mut var_b = 0.0;
                    let mut cov = 0.0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wt = win[dy * SSIM_WINDOW + dx];
                            let da = reference.data[[b, ch, oy + dy, ox + dx]] - mu_a;
                            let db = test.data[[b, ch, oy + dy, ox + dx]] - mu_b;
                            var_a += wt * da * da;
                            var_b += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                    let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}
