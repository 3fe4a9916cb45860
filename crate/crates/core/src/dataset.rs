//! Dataset ingestion: deterministic file listing, decode, center-crop,
//! resize, and normalization into the working pixel range. Includes a
//! synthetic natural-image generator for toy runs and tests.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, PIXEL_MIN, PIXEL_RANGE};

/// Which portion of the data a manifest covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Fraction of a flat directory assigned to the train split when there are
/// no `train/` / `test/` subdirectories.
const TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub image_count: usize,
    pub image_size: usize,
    /// Files that failed to decode and were skipped.
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

fn list_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads one image: decode, center-crop to square, resize, normalize.
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path)?;
    Ok(prepare_image(&img, size))
}

/// The ingest pipeline on an already-decoded image.
pub fn prepare_image(img: &image::DynamicImage, size: usize) -> ImageTensor {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let ox = (w - side) / 2;
    let oy = (h - side) / 2;
    let cropped = image::imageops::crop_imm(&rgb, ox, oy, side, side).to_image();
    let resized = image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle);
    ImageTensor::from_rgb8(&resized)
}

/// Scans a dataset directory and verifies every listed file decodes.
///
/// If `root/train` (or `root/test`) exists it is used for the requested
/// split; otherwise the lexicographic file list of `root` itself is split
/// 90/10. Undecodable files are skipped with a warning; an empty result is
/// an error.
pub fn ingest_dataset(root: &Path, split: Split, image_size: usize) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::config(format!("dataset root {} is not a directory", root.display())));
    }
    let sub = root.join(match split {
        Split::Train => "train",
        Split::Test => "test",
    });
    let candidates = if sub.is_dir() {
        list_sorted(&sub)?
    } else {
        let all = list_sorted(root)?;
        let cut = ((all.len() as f64) * TRAIN_FRACTION).floor() as usize;
        match split {
            Split::Train => all[..cut].to_vec(),
            Split::Test => all[cut..].to_vec(),
        }
    };

    let mut files = Vec::with_capacity(candidates.len());
    let mut warnings = Vec::new();
    for path in candidates {
        match image::open(&path) {
            Ok(_) => files.push(path),
            Err(e) => warnings.push(format!("skipped {}: {e}", path.display())),
        }
    }
    if files.is_empty() {
        return Err(Error::config(format!(
            "no decodable images for split {split:?} under {}",
            root.display()
        )));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        image_count: files.len(),
        image_size,
        warnings,
        files,
    })
}

/// All manifest images loaded to memory as 8-bit RGB, batchable on demand.
pub struct Dataset {
    pub size: usize,
    images: Vec<Vec<u8>>, // 3 * size * size, channel-major
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Dataset> {
        let s = manifest.image_size;
        let mut images = Vec::with_capacity(manifest.files.len());
        for path in &manifest.files {
            let t = load_image(path, s)?;
            let mut buf = vec![0u8; 3 * s * s];
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let v = (t.data[[0, c, y, x]] - PIXEL_MIN) / PIXEL_RANGE;
                        buf[(c * s + y) * s + x] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            images.push(buf);
        }
        Ok(Dataset { size: s, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Gathers the given indices into a normalized batch.
    pub fn batch(&self, indices: &[usize]) -> ImageTensor {
        let s = self.size;
        let mut data = Array4::zeros((indices.len(), 3, s, s));
        for (bi, &idx) in indices.iter().enumerate() {
            let buf = &self.images[idx % self.images.len()];
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        data[[bi, c, y, x]] =
                            buf[(c * s + y) * s + x] as f64 / 255.0 * PIXEL_RANGE + PIXEL_MIN;
                    }
                }
            }
        }
        ImageTensor { data }
    }
}

/// Writes `count` synthetic natural-looking PNGs (multi-octave smoothed
/// noise plus soft shapes) into `dir`, named `synthNNNNN.png`.
pub fn synthesize_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synth_image(seed.wrapping_add(i as u64), size);
        let path = dir.join(format!("synth{i:05}.png"));
        img.to_rgb8(0).save(&path).map_err(|e| Error::Image(e.to_string()))?;
        paths.push(path);
    }
    Ok(paths)
}

/// One synthetic image with natural-ish spectra.
pub fn synth_image(seed: u64, size: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array4::zeros((1, 3, size, size));

    // per-channel base gradient
    for c in 0..3 {
        let (gx, gy): (f64, f64) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let bias: f64 = rng.gen_range(-0.3..0.3);
        for y in 0..size {
            for x in 0..size {
                data[[0, c, y, x]] =
                    bias + gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
            }
        }
    }

    // multi-octave value noise (correlated across channels to mimic albedo)
    for octave in 0..4usize {
        let cells = 4usize << octave;
        let amp = 0.5 / (1 << octave) as f64;
        let grid: Vec<f64> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let tint: [f64; 3] = [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
        ];
        for y in 0..size {
            for x in 0..size {
                let fy = y as f64 / size as f64 * cells as f64;
                let fx = x as f64 / size as f64 * cells as f64;
                let y0 = fy.floor() as usize;
                let x0 = fx.floor() as usize;
                let dy = fy - y0 as f64;
                let dx = fx - x0 as f64;
                let sy = dy * dy * (3.0 - 2.0 * dy);
                let sx = dx * dx * (3.0 - 2.0 * dx);
                let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
                let v = at(y0, x0) * (1.0 - sy) * (1.0 - sx)
                    + at(y0, x0 + 1) * (1.0 - sy) * sx
                    + at(y0 + 1, x0) * sy * (1.0 - sx)
                    + at(y0 + 1, x0 + 1) * sy * sx;
                for c in 0..3 {
                    data[[0, c, y, x]] += amp * tint[c] * v;
                }
            }
        }
    }

    // a few soft ellipses
    for _ in 0..rng.gen_range(2..5) {
        let cy: f64 = rng.gen_range(0.0..size as f64);
        let cx: f64 = rng.gen_range(0.0..size as f64);
        let ry: f64 = rng.gen_range(size as f64 * 0.08..size as f64 * 0.3);
        let rx: f64 = rng.gen_range(size as f64 * 0.08..size as f64 * 0.3);
        let tint: [f64; 3] = [
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
        ];
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                if d < 1.0 {
                    let fall = (1.0 - d).powi(2);
                    for c in 0..3 {
                        data[[0, c, y, x]] += tint[c] * fall;
                    }
                }
            }
        }
    }

    ImageTensor::from_clamped(data)
}
