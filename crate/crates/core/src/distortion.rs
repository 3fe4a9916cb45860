//! Evaluation-time distortions with fixed strength ranges, used to
//! stress-test trained models. These are not part of the training loop —
//! the learnable attack networks replace the classic noise layer there —
//! so non-differentiable operations (real JPEG round trips) are fine.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeedStream, StreamRole};
use crate::tensor::{ImageTensor, PIXEL_MAX, PIXEL_MIN};

/// Distortion family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Identity,
    ResizedCrop,
    Erasing,
    Brightness,
    Blurring,
    Rotation,
    Contrast,
    GaussianNoise,
    JpegCompression,
    Dropout,
    Saturation,
}

impl DistortionKind {
    /// Legal strength bounds (inclusive); `None` for identity.
    pub fn legal_range(&self) -> Option<(f64, f64)> {
        match self {
            DistortionKind::Identity => None,
            DistortionKind::ResizedCrop => Some((0.10, 0.15)),
            DistortionKind::Erasing => Some((0.05, 0.25)),
            DistortionKind::Brightness => Some((0.2, 1.0)),
            DistortionKind::Blurring => Some((4.0, 20.0)),
            DistortionKind::Rotation => Some((9.0, 45.0)),
            DistortionKind::Contrast => Some((0.2, 1.0)),
            DistortionKind::GaussianNoise => Some((0.02, 0.1)),
            DistortionKind::JpegCompression => Some((10.0, 90.0)),
            DistortionKind::Dropout => Some((0.0, 0.99)),
            DistortionKind::Saturation => Some((1.0, 30.0)),
        }
    }

    /// Report column name.
    pub fn column_name(&self) -> &'static str {
        match self {
            DistortionKind::Identity => "identity",
            DistortionKind::ResizedCrop => "resizedcrop",
            DistortionKind::Erasing => "erasing",
            DistortionKind::Brightness => "brightness",
            DistortionKind::Blurring => "blurring",
            DistortionKind::Rotation => "rotation",
            DistortionKind::Contrast => "contrast",
            DistortionKind::GaussianNoise => "noise",
            DistortionKind::JpegCompression => "compression",
            DistortionKind::Dropout => "dropout",
            DistortionKind::Saturation => "saturation",
        }
    }
}

/// Fixed value or inclusive range to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Strength {
    Fixed(f64),
    Range { lo: f64, hi: f64 },
}

/// One named distortion with its strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub strength: Option<Strength>,
}

impl DistortionSpec {
    pub fn identity() -> Self {
        DistortionSpec {
            kind: DistortionKind::Identity,
            strength: None,
        }
    }

    pub fn fixed(kind: DistortionKind, strength: f64) -> Self {
        DistortionSpec {
            kind,
            strength: Some(Strength::Fixed(strength)),
        }
    }

    pub fn range(kind: DistortionKind, lo: f64, hi: f64) -> Self {
        DistortionSpec {
            kind,
            strength: Some(Strength::Range { lo, hi }),
        }
    }

    /// Errors when the strength lies outside the kind's legal bounds.
    pub fn validate(&self) -> Result<()> {
        match (self.kind.legal_range(), self.strength) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::config("identity takes no strength")),
            (Some(_), None) => Err(Error::config(format!(
                "{} requires a strength",
                self.kind.column_name()
            ))),
            (Some((lo, hi)), Some(s)) => {
                let check = |v: f64| {
                    if v < lo || v > hi {
                        Err(Error::config(format!(
                            "{} strength {v} outside legal range [{lo}, {hi}]",
                            self.kind.column_name()
                        )))
                    } else {
                        Ok(())
                    }
                };
                match s {
                    Strength::Fixed(v) => check(v),
                    Strength::Range { lo: a, hi: b } => {
                        if a > b {
                            return Err(Error::config(format!(
                                "{} range [{a}, {b}] is inverted",
                                self.kind.column_name()
                            )));
                        }
                        check(a)?;
                        check(b)
                    }
                }
            }
        }
    }
}

/// The stress-test panel: one range-spec per distortion column.
pub fn table1_panel() -> Vec<DistortionSpec> {
    [
        DistortionKind::ResizedCrop,
        DistortionKind::Erasing,
        DistortionKind::Brightness,
        DistortionKind::Blurring,
        DistortionKind::Rotation,
        DistortionKind::Contrast,
        DistortionKind::GaussianNoise,
        DistortionKind::JpegCompression,
    ]
    .iter()
    .map(|&kind| {
        let (lo, hi) = kind.legal_range().unwrap();
        DistortionSpec::range(kind, lo, hi)
    })
    .collect()
}

/// Draws a concrete strength uniformly from the closed interval.
pub fn sample_strength(kind: DistortionKind, range: (f64, f64), rng: &mut impl Rng) -> Result<DistortionSpec> {
    let (lo, hi) = range;
    if lo > hi {
        return Err(Error::config(format!(
            "{} range [{lo}, {hi}] is inverted",
            kind.column_name()
        )));
    }
    DistortionSpec::range(kind, lo, hi).validate()?;
    let v = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let spec = DistortionSpec::fixed(kind, v);
    spec.validate()?;
    Ok(spec)
}

fn resolve_strength(spec: &DistortionSpec, rng: &mut impl Rng) -> Option<f64> {
    spec.strength.map(|s| match s {
        Strength::Fixed(v) => v,
        Strength::Range { lo, hi } => {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            }
        }
    })
}

/// Applies one distortion to a batch; same shape out, deterministic given
/// `(spec, rng state)`.
pub fn apply_distortion(img: &ImageTensor, spec: &DistortionSpec, rng: &mut impl Rng) -> Result<ImageTensor> {
    spec.validate()?;
    let s = resolve_strength(spec, rng);
    let out = match spec.kind {
        DistortionKind::Identity => img.clone(),
        DistortionKind::ResizedCrop => resized_crop(img, s.unwrap(), rng),
        DistortionKind::Erasing => erasing(img, s.unwrap(), rng),
        DistortionKind::Brightness => brightness(img, s.unwrap()),
        DistortionKind::Blurring => blur(img, s.unwrap()),
        DistortionKind::Rotation => rotate(img, s.unwrap()),
        DistortionKind::Contrast => contrast(img, s.unwrap()),
        DistortionKind::GaussianNoise => gaussian_noise(img, s.unwrap(), rng),
        DistortionKind::JpegCompression => jpeg_round_trip(img, s.unwrap())?,
        DistortionKind::Dropout => dropout(img, s.unwrap(), rng),
        DistortionKind::Saturation => saturation(img, s.unwrap()),
    };
    Ok(out)
}

/// One distorted copy per Table-1 kind at a sampled strength, plus the
/// untouched identity output, in report column order.
pub fn distortion_panel(img: &ImageTensor, seed: u64) -> Result<Vec<(DistortionSpec, ImageTensor)>> {
    let mut rng = SeedStream::new(seed, StreamRole::Distortion);
    let mut out = vec![(DistortionSpec::identity(), img.clone())];
    for family in table1_panel() {
        let (lo, hi) = match family.strength.unwrap() {
            Strength::Range { lo, hi } => (lo, hi),
            Strength::Fixed(v) => (v, v),
        };
        let spec = sample_strength(family.kind, (lo, hi), &mut rng)?;
        let distorted = apply_distortion(img, &spec, &mut rng)?;
        out.push((spec, distorted));
    }
    Ok(out)
}

fn to01(v: f64) -> f64 {
    (v - PIXEL_MIN) / (PIXEL_MAX - PIXEL_MIN)
}

fn from01(v: f64) -> f64 {
    (v * (PIXEL_MAX - PIXEL_MIN) + PIXEL_MIN).clamp(PIXEL_MIN, PIXEL_MAX)
}

/// Crops away fraction `p` of the area (random location), then resizes the
/// kept region back to the original size.
fn resized_crop(img: &ImageTensor, p: f64, rng: &mut impl Rng) -> ImageTensor {
    let (b, _, h, w) = img.data.dim();
    let keep = (1.0 - p).sqrt();
    let ch = ((h as f64 * keep).round() as usize).max(1);
    let cw = ((w as f64 * keep).round() as usize).max(1);
    let oy = rng.gen_range(0..=(h - ch));
    let ox = rng.gen_range(0..=(w - cw));
    let mut out = Array4::zeros((b, 3, h, w));
    for bi in 0..b {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    // map output pixel into the cropped window
                    let sy = oy as f64 + (y as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
                    let sx = ox as f64 + (x as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
                    out[[bi, c, y, x]] = bilinear(&img.data, bi, c, sy, sx, 0.0);
                }
            }
        }
    }
    ImageTensor::from_clamped(out)
}

/// Zeroes a random rectangle covering fraction `p` of the area.
fn erasing(img: &ImageTensor, p: f64, rng: &mut impl Rng) -> ImageTensor {
    let (b, _, h, w) = img.data.dim();
    let mut out = img.data.clone();
    for bi in 0..b {
        let area = p * (h * w) as f64;
        let aspect = rng.gen_range(0.5..2.0);
        let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
        let rh = ((area / rw as f64).round() as usize).clamp(1, h);
        let oy = rng.gen_range(0..=(h - rh));
        let ox = rng.gen_range(0..=(w - rw));
        for c in 0..3 {
            for y in oy..oy + rh {
                for x in ox..ox + rw {
                    out[[bi, c, y, x]] = 0.0;
                }
            }
        }
    }
    ImageTensor { data: out }
}

/// Scales intensity by `factor` in [0,1] space (blend toward black).
fn brightness(img: &ImageTensor, factor: f64) -> ImageTensor {
    ImageTensor {
        data: img.data.mapv(|v| from01(to01(v) * factor)),
    }
}

/// Scales deviation from the per-image mean intensity by `factor`.
fn contrast(img: &ImageTensor, factor: f64) -> ImageTensor {
    let (b, _, h, w) = img.data.dim();
    let mut out = img.data.clone();
    for bi in 0..b {
        let mut mean = 0.0;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    mean += to01(img.data[[bi, c, y, x]]);
                }
            }
        }
        mean /= (3 * h * w) as f64;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = to01(img.data[[bi, c, y, x]]);
                    out[[bi, c, y, x]] = from01(mean + (v - mean) * factor);
                }
            }
        }
    }
    ImageTensor { data: out }
}

/// Gaussian blur with kernel size `p` pixels (rounded odd), edge-replicated.
fn blur(img: &ImageTensor, p: f64) -> ImageTensor {
    let k = {
        let r = p.round() as usize;
        if r % 2 == 0 {
            r + 1
        } else {
            r
        }
    };
    let half = (k / 2) as isize;
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let kernel: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|v| v / norm).collect();

    let (b, _, h, w) = img.data.dim();
    let mut tmp = Array4::zeros((b, 3, h, w));
    for bi in 0..b {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, kv) in kernel.iter().enumerate() {
                        let sx = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                        acc += kv * img.data[[bi, c, y, sx]];
                    }
                    tmp[[bi, c, y, x]] = acc;
                }
            }
        }
    }
    let mut out = Array4::zeros((b, 3, h, w));
    for bi in 0..b {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, kv) in kernel.iter().enumerate() {
                        let sy = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                        acc += kv * tmp[[bi, c, sy, x]];
                    }
                    out[[bi, c, y, x]] = acc;
                }
            }
        }
    }
    ImageTensor::from_clamped(out)
}

fn bilinear(data: &Array4<f64>, b: usize, c: usize, y: f64, x: f64, fill: f64) -> f64 {
    let (_, _, h, w) = data.dim();
    if y < -1.0 || x < -1.0 || y > h as f64 || x > w as f64 {
        return fill;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            fill
        } else {
            data[[b, c, yy as usize, xx as usize]]
        }
    };
    let v00 = sample(y0, x0);
    let v01 = sample(y0, x0 + 1.0);
    let v10 = sample(y0 + 1.0, x0);
    let v11 = sample(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - dy) * (1.0 - dx) + v01 * (1.0 - dy) * dx + v10 * dy * (1.0 - dx) + v11 * dy * dx
}

/// Rotates about the image center by `degrees` (positive =
/// counter-clockwise), bilinear sampling, zero fill on exposed corners.
pub fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    let (b, _, h, w) = img.data.dim();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array4::zeros((b, 3, h, w));
    for bi in 0..b {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let ry = y as f64 - cy;
                    let rx = x as f64 - cx;
                    // inverse rotation to find the source pixel
                    let sy = cy + ry * cos - rx * sin;
                    let sx = cx + ry * sin + rx * cos;
                    out[[bi, c, y, x]] = bilinear(&img.data, bi, c, sy, sx, 0.0);
                }
            }
        }
    }
    ImageTensor::from_clamped(out)
}

fn gaussian_noise(img: &ImageTensor, std: f64, rng: &mut impl Rng) -> ImageTensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    ImageTensor::from_clamped(img.data.mapv(|v| v + dist.sample(rng)))
}

/// Real JPEG encode/decode at the given quality.
fn jpeg_round_trip(img: &ImageTensor, quality: f64) -> Result<ImageTensor> {
    let q = quality.round().clamp(1.0, 100.0) as u8;
    let (b, _, h, w) = img.data.dim();
    let mut out = Array4::zeros((b, 3, h, w));
    for bi in 0..b {
        let rgb = img.to_rgb8(bi);
        let mut buf = Vec::new();
        {
            let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, q);
            enc.encode_image(&rgb)?;
        }
        let decoded = image::load_from_memory(&buf)?.to_rgb8();
        let single = ImageTensor::from_rgb8(&decoded);
        out.slice_mut(ndarray::s![bi, .., .., ..])
            .assign(&single.data.slice(ndarray::s![0, .., .., ..]));
    }
    Ok(ImageTensor { data: out })
}

/// Zeroes each pixel (all channels) independently with probability `p`.
fn dropout(img: &ImageTensor, p: f64, rng: &mut impl Rng) -> ImageTensor {
    let (b, _, h, w) = img.data.dim();
    let mut out = img.data.clone();
    let keep = Array2::from_shape_fn((h, w), |_| rng.gen::<f64>() >= p);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if !keep[[y, x]] {
                    for c in 0..3 {
                        out[[bi, c, y, x]] = 0.0;
                    }
                }
            }
        }
    }
    ImageTensor { data: out }
}

/// Scales per-pixel chroma around luma by `factor`.
fn saturation(img: &ImageTensor, factor: f64) -> ImageTensor {
    let (b, _, h, w) = img.data.dim();
    let mut out = Array4::zeros((b, 3, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let r = img.data[[bi, 0, y, x]];
                let g = img.data[[bi, 1, y, x]];
                let bl = img.data[[bi, 2, y, x]];
                let luma = 0.299 * r + 0.587 * g + 0.114 * bl;
                for (c, v) in [r, g, bl].into_iter().enumerate() {
                    out[[bi, c, y, x]] = (luma + (v - luma) * factor).clamp(PIXEL_MIN, PIXEL_MAX);
                }
            }
        }
    }
    ImageTensor { data: out }
}
