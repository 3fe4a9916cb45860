//! Stress-test runner and report generation.
//!
//! For every evaluation image a random message is embedded; each distortion
//! kind then draws a strength from its range, degrades the watermarked
//! image, and the decoder + channel codec recover the message. Cells hold
//! mean post-codec bit accuracy. The CSV layout is fixed:
//! `method, identity, resizedcrop, erasing, brightness, blurring, rotation,
//! contrast, noise, compression, avg`, with `avg` the arithmetic mean of
//! the distortion columns excluding identity.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{binarize_batch, ChannelCodec};
use crate::dataset::Dataset;
use crate::distortion::{apply_distortion, sample_strength, DistortionKind, DistortionSpec, Strength};
use crate::error::{Error, Result};
use crate::metrics::{bit_accuracy_batch, psnr, ssim, ChannelSelector};
use crate::rng::{SeedStream, StreamRole};
use crate::tensor::ImageTensor;
use crate::watermark::WatermarkModel;

/// Image-quality summary between covers and watermarked images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityBlock {
    pub psnr_rgb: f64,
    pub psnr_y: f64,
    pub psnr_u: f64,
    pub psnr_v: f64,
    pub psnr_b: f64,
    pub ssim: f64,
}

/// One (distortion kind, strength range) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub kind: DistortionKind,
    pub strength_lo: Option<f64>,
    pub strength_hi: Option<f64>,
    pub mean_bit_acc: f64,
    /// Redundant-level (pre-codec) mean accuracy, for diagnostics.
    pub mean_redundant_acc: f64,
    pub samples: usize,
}

/// Full stress-test result for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub cells: Vec<ReportCell>,
    pub quality: QualityBlock,
    pub seed: u64,
    pub images: usize,
}

/// Fixed CSV column order (distortion part).
pub const CSV_DISTORTION_COLUMNS: [DistortionKind; 8] = [
    DistortionKind::ResizedCrop,
    DistortionKind::Erasing,
    DistortionKind::Brightness,
    DistortionKind::Blurring,
    DistortionKind::Rotation,
    DistortionKind::Contrast,
    DistortionKind::GaussianNoise,
    DistortionKind::JpegCompression,
];

impl EvalReport {
    fn cell(&self, kind: DistortionKind) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.kind == kind)
    }

    /// Mean of the evaluated distortion cells, excluding identity.
    pub fn avg(&self) -> f64 {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.kind != DistortionKind::Identity)
            .map(|c| c.mean_bit_acc)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Table-shaped CSV; cells render with full float precision so the
    /// averaging convention can be re-checked from the file.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,identity,resizedcrop,erasing,brightness,blurring,rotation,contrast,noise,compression,avg\n",
        );
        out.push_str(&self.method);
        let fmt = |v: f64| {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v}")
            }
        };
        let identity = self
            .cell(DistortionKind::Identity)
            .map(|c| fmt(c.mean_bit_acc))
            .unwrap_or_default();
        out.push(',');
        out.push_str(&identity);
        for kind in CSV_DISTORTION_COLUMNS {
            out.push(',');
            if let Some(c) = self.cell(kind) {
                out.push_str(&fmt(c.mean_bit_acc));
            }
        }
        out.push(',');
        out.push_str(&fmt(self.avg()));
        out.push('\n');
        out
    }

    /// Companion JSON with per-cell sample counts, quality block and seed.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn random_messages(batch: usize, len: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((batch, len), |_| f64::from(rng.gen::<bool>()))
}

/// Checks that a model and codec agree on the redundant length.
pub fn check_compatible(model: &WatermarkModel, codec: &ChannelCodec) -> Result<()> {
    let m = model.cfg.redundant_len;
    let c = codec.config().redundant_len;
    if m != c {
        return Err(Error::config(format!(
            "incompatible checkpoints: model redundant length {m}, codec redundant length {c}"
        )));
    }
    Ok(())
}

/// Runs the stress test over `images` evaluation images.
///
/// Deterministic given `seed`: message draws come from the eval stream and
/// strength/position draws from the distortion stream, consumed in a fixed
/// order.
pub fn run_stress_test(
    model: &WatermarkModel,
    codec: &ChannelCodec,
    data: &Dataset,
    specs: &[DistortionSpec],
    method: &str,
    images: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_compatible(model, codec)?;
    for s in specs {
        s.validate()?;
    }
    let n = images.min(data.len()).max(1);
    let mut msg_rng = SeedStream::new(seed, StreamRole::Eval);
    let mut dist_rng = SeedStream::new(seed, StreamRole::Distortion);

    let covers = data.batch(&(0..n).collect::<Vec<_>>());
    let msgs = random_messages(n, codec.config().msg_len, &mut msg_rng);
    let m_enc = codec.encode_batch(&msgs);
    let wm = model.embed(&covers, &m_enc)?;

    let quality = QualityBlock {
        psnr_rgb: psnr(&covers, &wm, ChannelSelector::Rgb)?,
        psnr_y: psnr(&covers, &wm, ChannelSelector::Y)?,
        psnr_u: psnr(&covers, &wm, ChannelSelector::U)?,
        psnr_v: psnr(&covers, &wm, ChannelSelector::V)?,
        psnr_b: psnr(&covers, &wm, ChannelSelector::B)?,
        ssim: ssim(&covers, &wm)?,
    };

    let mut cells = Vec::with_capacity(specs.len() + 1);

    // identity column: clean extraction
    let logits = model.extract(&wm)?;
    let redundant = binarize_batch(&logits);
    let decoded = codec.decode_batch(&redundant);
    cells.push(ReportCell {
        kind: DistortionKind::Identity,
        strength_lo: None,
        strength_hi: None,
        mean_bit_acc: bit_accuracy_batch(&decoded, &msgs),
        mean_redundant_acc: bit_accuracy_batch(&redundant, &m_enc),
        samples: n,
    });

    for spec in specs {
        let (lo, hi) = match spec.strength {
            Some(Strength::Range { lo, hi }) => (lo, hi),
            Some(Strength::Fixed(v)) => (v, v),
            None => {
                // an explicit identity entry in the list: skip, the column
                // is always present
                continue;
            }
        };
        // per-image strengths, batched extraction
        let mut distorted = ndarray::Array4::zeros(wm.data.raw_dim());
        for i in 0..n {
            let one = ImageTensor {
                data: wm
                    .data
                    .slice(ndarray::s![i..i + 1, .., .., ..])
                    .to_owned(),
            };
            let concrete = sample_strength(spec.kind, (lo, hi), &mut dist_rng)?;
            let out = apply_distortion(&one, &concrete, &mut dist_rng)?;
            distorted
                .slice_mut(ndarray::s![i..i + 1, .., .., ..])
                .assign(&out.data);
        }
        let distorted = ImageTensor { data: distorted };
        let logits = model.extract(&distorted)?;
        let redundant = binarize_batch(&logits);
        let decoded = codec.decode_batch(&redundant);
        cells.push(ReportCell {
            kind: spec.kind,
            strength_lo: Some(lo),
            strength_hi: Some(hi),
            mean_bit_acc: bit_accuracy_batch(&decoded, &msgs),
            mean_redundant_acc: bit_accuracy_batch(&redundant, &m_enc),
            samples: n,
        });
    }

    Ok(EvalReport {
        method: method.to_string(),
        cells,
        quality,
        seed,
        images: n,
    })
}

/// One point of an accuracy-vs-strength curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub kind: DistortionKind,
    pub strength: f64,
    pub bit_acc: f64,
    pub samples: usize,
}

/// Sweeps each distortion across a strength grid, producing curve series.
pub fn strength_curves(
    model: &WatermarkModel,
    codec: &ChannelCodec,
    data: &Dataset,
    specs: &[DistortionSpec],
    points_per_kind: usize,
    images: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    check_compatible(model, codec)?;
    let n = images.min(data.len()).max(1);
    let mut msg_rng = SeedStream::new(seed, StreamRole::Eval);
    let mut dist_rng = SeedStream::new(seed, StreamRole::Distortion);
    let covers = data.batch(&(0..n).collect::<Vec<_>>());
    let msgs = random_messages(n, codec.config().msg_len, &mut msg_rng);
    let m_enc = codec.encode_batch(&msgs);
    let wm = model.embed(&covers, &m_enc)?;

    let mut out = Vec::new();
    for spec in specs {
        let (lo, hi) = match spec.strength {
            Some(Strength::Range { lo, hi }) => (lo, hi),
            Some(Strength::Fixed(v)) => (v, v),
            None => continue,
        };
        for p in 0..points_per_kind {
            let strength = if points_per_kind == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * p as f64 / (points_per_kind - 1) as f64
            };
            let concrete = DistortionSpec::fixed(spec.kind, strength);
            let distorted = apply_distortion(&wm, &concrete, &mut dist_rng)?;
            let logits = model.extract(&distorted)?;
            let decoded = codec.decode_batch(&binarize_batch(&logits));
            out.push(CurvePoint {
                kind: spec.kind,
                strength,
                bit_acc: bit_accuracy_batch(&decoded, &msgs),
                samples: n,
            });
        }
    }
    Ok(out)
}

/// CSV form of curve series: `method,kind,strength,bit_acc,samples`.
pub fn curves_to_csv(method: &str, points: &[CurvePoint]) -> String {
    let mut out = String::from("method,kind,strength,bit_acc,samples\n");
    for p in points {
        out.push_str(&format!(
            "{method},{},{},{},{}\n",
            p.kind.column_name(),
            p.strength,
            p.bit_acc,
            p.samples
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_report() -> EvalReport {
        let mk = |kind, acc: f64| ReportCell {
            kind,
            strength_lo: Some(0.1),
            strength_hi: Some(0.2),
            mean_bit_acc: acc,
            mean_redundant_acc: acc,
            samples: 10,
        };
        EvalReport {
            method: "toy".into(),
            cells: vec![
                ReportCell {
                    kind: DistortionKind::Identity,
                    strength_lo: None,
                    strength_hi: None,
                    mean_bit_acc: 99.0,
                    mean_redundant_acc: 98.0,
                    samples: 10,
                },
                mk(DistortionKind::ResizedCrop, 90.0),
                mk(DistortionKind::Erasing, 80.0),
                mk(DistortionKind::Brightness, 70.0),
                mk(DistortionKind::Blurring, 60.0),
                mk(DistortionKind::Rotation, 50.0),
                mk(DistortionKind::Contrast, 40.0),
                mk(DistortionKind::GaussianNoise, 30.0),
                mk(DistortionKind::JpegCompression, 20.0),
            ],
            quality: QualityBlock {
                psnr_rgb: 30.0,
                psnr_y: 31.0,
                psnr_u: 40.0,
                psnr_v: 41.0,
                psnr_b: 29.0,
                ssim: 0.95,
            },
            seed: 1,
            images: 10,
        }
    }

    #[test]
    fn avg_excludes_identity() {
        let r = synthetic_report();
        let expect = (90.0 + 80.0 + 70.0 + 60.0 + 50.0 + 40.0 + 30.0 + 20.0) / 8.0;
        assert!((r.avg() - expect).abs() < 1e-9);
    }

    #[test]
    fn csv_layout_exact() {
        let r = synthetic_report();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,identity,resizedcrop,erasing,brightness,blurring,rotation,contrast,noise,compression,avg"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 11);
        assert_eq!(row[0], "toy");
        assert_eq!(row[1], "99");
        let avg: f64 = row[10].parse().unwrap();
        assert!((avg - r.avg()).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let r = synthetic_report();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(r, back);
    }
}
