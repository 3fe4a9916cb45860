//! Blockwise 8x8 discrete cosine transform, frequency masking, and
//! frequency-band token rearrangement.
//!
//! The transform is orthonormal per block (Parseval holds), so the inverse
//! is the transpose and gradients of both directions are the opposite
//! transform applied to the incoming gradient.

use ndarray::{Array2, Array3, Array4, Array6, s};

use crate::error::{Error, Result};

/// Block side length.
pub const BLOCK: usize = 8;

/// Per-channel 8x8 blockwise DCT coefficients of an image batch.
/// Layout `[batch, channel, blocks_y, blocks_x, 8, 8]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBlockGrid {
    pub coeffs: Array6<f64>,
}

impl DctBlockGrid {
    pub fn batch(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn blocks_y(&self) -> usize {
        self.coeffs.shape()[2]
    }

    pub fn blocks_x(&self) -> usize {
        self.coeffs.shape()[3]
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks_y() * self.blocks_x()
    }
}

/// Orthonormal 1-D DCT-II basis: `G[i][x] = sqrt(2/N) * k(i) * cos((2x+1) i pi / (2N))`
/// with `k(0) = 1/sqrt(2)`, `k(i>0) = 1`.
pub fn dct_basis() -> Array2<f64> {
    let n = BLOCK;
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        let k = if i == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
        for x in 0..n {
            g[[i, x]] = (2.0 / n as f64).sqrt()
                * k
                * (((2 * x + 1) as f64 * i as f64 * std::f64::consts::PI) / (2.0 * n as f64)).cos();
        }
    }
    g
}

fn transform_blocks(data: &Array4<f64>, basis: &Array2<f64>, transpose: bool) -> Array6<f64> {
    let (b, c, h, w) = data.dim();
    let by = h / BLOCK;
    let bx = w / BLOCK;
    let g = if transpose { basis.t().to_owned() } else { basis.clone() };
    let gt = g.t().to_owned();
    let mut out = Array6::zeros((b, c, by, bx, BLOCK, BLOCK));
    for bi in 0..b {
        for ci in 0..c {
            for yb in 0..by {
                for xb in 0..bx {
                    let block = data
                        .slice(s![bi, ci, yb * BLOCK..(yb + 1) * BLOCK, xb * BLOCK..(xb + 1) * BLOCK])
                        .to_owned();
                    let res = g.dot(&block).dot(&gt);
                    out.slice_mut(s![bi, ci, yb, xb, .., ..]).assign(&res);
                }
            }
        }
    }
    out
}

/// Lays grid coefficients back into an image-shaped plane, each block at
/// its spatial position (the layout CNN backbones operate on).
pub fn grid_to_plane(grid: &Array6<f64>) -> Array4<f64> {
    let (b, c, by, bx, _, _) = grid.dim();
    let mut out = Array4::zeros((b, c, by * BLOCK, bx * BLOCK));
    for bi in 0..b {
        for ci in 0..c {
            for yb in 0..by {
                for xb in 0..bx {
                    out.slice_mut(s![bi, ci, yb * BLOCK..(yb + 1) * BLOCK, xb * BLOCK..(xb + 1) * BLOCK])
                        .assign(&grid.slice(s![bi, ci, yb, xb, .., ..]));
                }
            }
        }
    }
    out
}

/// Inverse of [`grid_to_plane`].
pub fn plane_to_grid(plane: &Array4<f64>) -> Array6<f64> {
    let (b, c, h, w) = plane.dim();
    let (by, bx) = (h / BLOCK, w / BLOCK);
    let mut out = Array6::zeros((b, c, by, bx, BLOCK, BLOCK));
    for bi in 0..b {
        for ci in 0..c {
            for yb in 0..by {
                for xb in 0..bx {
                    out.slice_mut(s![bi, ci, yb, xb, .., ..]).assign(&plane.slice(s![
                        bi,
                        ci,
                        yb * BLOCK..(yb + 1) * BLOCK,
                        xb * BLOCK..(xb + 1) * BLOCK
                    ]));
                }
            }
        }
    }
    out
}

/// Forward blockwise DCT of a (typically YUV) pixel batch.
///
/// Errors if height or width is not divisible by 8.
pub fn dct_forward_blocks(data: &Array4<f64>) -> Result<DctBlockGrid> {
    let (_, _, h, w) = data.dim();
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::config(format!(
            "image sides must be divisible by {BLOCK}, got {h}x{w}"
        )));
    }
    let basis = dct_basis();
    Ok(DctBlockGrid {
        coeffs: transform_blocks(data, &basis, false),
    })
}

/// Inverse blockwise DCT back to a pixel batch.
pub fn dct_inverse_blocks(grid: &DctBlockGrid) -> Array4<f64> {
    let basis = dct_basis();
    let plane = grid_to_plane(&grid.coeffs);
    let inv = transform_blocks(&plane, &basis, true);
    grid_to_plane(&inv)
}

/// Gradient of [`dct_forward_blocks`] with respect to its input:
/// the inverse transform applied to the coefficient gradient.
pub fn dct_forward_backward(grad_coeffs: &DctBlockGrid) -> Array4<f64> {
    dct_inverse_blocks(grad_coeffs)
}

/// Gradient of [`dct_inverse_blocks`] with respect to its input:
/// the forward transform applied to the pixel gradient.
pub fn dct_inverse_backward(grad_pixels: &Array4<f64>) -> DctBlockGrid {
    DctBlockGrid {
        coeffs: transform_blocks(grad_pixels, &dct_basis(), false),
    }
}

/// Which of the 64 per-block frequency coordinates survive masking.
/// The DC coefficient (0, 0) is always kept.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    keep: [[bool; BLOCK]; BLOCK],
}

impl FrequencyMask {
    /// Keeps coefficients with `i + j <= threshold`, zeroing the rest.
    /// The default attack mask uses `threshold = 8`.
    pub fn anti_diagonal(threshold: usize) -> FrequencyMask {
        let mut keep = [[false; BLOCK]; BLOCK];
        for (i, row) in keep.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = i + j <= threshold;
            }
        }
        FrequencyMask { keep }
    }

    /// Keeps everything.
    pub fn identity() -> FrequencyMask {
        FrequencyMask {
            keep: [[true; BLOCK]; BLOCK],
        }
    }

    /// Builds a mask from an explicit keep table; the DC entry must be kept.
    pub fn from_table(keep: [[bool; BLOCK]; BLOCK]) -> Result<FrequencyMask> {
        if !keep[0][0] {
            return Err(Error::config("frequency mask must keep the DC coefficient (0,0)"));
        }
        Ok(FrequencyMask { keep })
    }

    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i][j]
    }

    /// Number of kept coefficients out of 64.
    pub fn kept_count(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| k).count()
    }
}

impl Default for FrequencyMask {
    fn default() -> Self {
        FrequencyMask::anti_diagonal(8)
    }
}

/// Zeroes every masked coefficient; kept coefficients pass unchanged.
pub fn apply_frequency_mask(grid: &DctBlockGrid, mask: &FrequencyMask) -> DctBlockGrid {
    let mut out = grid.clone();
    let (b, c, by, bx, _, _) = out.coeffs.dim();
    for bi in 0..b {
        for ci in 0..c {
            for yb in 0..by {
                for xb in 0..bx {
                    for i in 0..BLOCK {
                        for j in 0..BLOCK {
                            if !mask.keeps(i, j) {
                                out.coeffs[[bi, ci, yb, xb, i, j]] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gathers same-frequency coefficients from all blocks into tokens.
///
/// Token `t = channel * 64 + (i * 8 + j)` holds coefficient `(i, j)` of every
/// block in raster order, so the output is `[batch, channels * 64, n_blocks]`.
/// Token `(0, 0)` of a channel is the vector of all its block DC values.
pub fn band_rearrange(grid: &DctBlockGrid) -> Array3<f64> {
    let (b, c, by, bx, _, _) = grid.coeffs.dim();
    let nb = by * bx;
    let mut out = Array3::zeros((b, c * BLOCK * BLOCK, nb));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    let t = ci * BLOCK * BLOCK + i * BLOCK + j;
                    for yb in 0..by {
                        for xb in 0..bx {
                            out[[bi, t, yb * bx + xb]] = grid.coeffs[[bi, ci, yb, xb, i, j]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse permutation of [`band_rearrange`].
pub fn band_unrearrange(tokens: &Array3<f64>, blocks_y: usize, blocks_x: usize) -> DctBlockGrid {
    let (b, t_total, nb) = tokens.dim();
    let c = t_total / (BLOCK * BLOCK);
    debug_assert_eq!(nb, blocks_y * blocks_x);
    let mut out = Array6::zeros((b, c, blocks_y, blocks_x, BLOCK, BLOCK));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    let t = ci * BLOCK * BLOCK + i * BLOCK + j;
                    for yb in 0..blocks_y {
                        for xb in 0..blocks_x {
                            out[[bi, ci, yb, xb, i, j]] = tokens[[bi, t, yb * blocks_x + xb]];
                        }
                    }
                }
            }
        }
    }
    DctBlockGrid { coeffs: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force double sum, written directly from the transform
    /// definition, used as the independent oracle.
    fn dct_block_oracle(block: &Array2<f64>) -> Array2<f64> {
        let n = BLOCK;
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let ki = if i == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
                let kj = if j == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
                let mut acc = 0.0;
                for x in 0..n {
                    for y in 0..n {
                        acc += block[[x, y]]
                            * (((2 * x + 1) as f64 * i as f64 * std::f64::consts::PI)
                                / (2.0 * n as f64))
                                .cos()
                            * (((2 * y + 1) as f64 * j as f64 * std::f64::consts::PI)
                                / (2.0 * n as f64))
                                .cos();
                    }
                }
                out[[i, j]] = (1.0 / (2.0 * n as f64).sqrt()) * ki * kj * acc;
            }
        }
        out
    }

    #[test]
    fn constant_block_is_dc_only() {
        let c = 0.37;
        let data = Array4::from_elem((1, 1, BLOCK, BLOCK), c);
        let grid = dct_forward_blocks(&data).unwrap();
        assert!((grid.coeffs[[0, 0, 0, 0, 0, 0]] - 8.0 * c).abs() < 1e-12);
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                if i + j > 0 {
                    assert!(grid.coeffs[[0, 0, 0, 0, i, j]].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let block = Array2::from_shape_fn((BLOCK, BLOCK), |_| rng.gen_range(-1.0..1.0));
            let mut data = Array4::zeros((1, 1, BLOCK, BLOCK));
            data.slice_mut(s![0, 0, .., ..]).assign(&block);
            let fast = dct_forward_blocks(&data).unwrap();
            let slow = dct_block_oracle(&block);
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    assert!((fast.coeffs[[0, 0, 0, 0, i, j]] - slow[[i, j]]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn parseval_per_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let grid = dct_forward_blocks(&data).unwrap();
        let ex: f64 = data.iter().map(|v| v * v).sum();
        let ec: f64 = grid.coeffs.iter().map(|v| v * v).sum();
        assert!((ex - ec).abs() < 1e-5 * ex.max(1.0));
    }

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array4::from_shape_fn((1, 3, 24, 32), |_| rng.gen_range(-1.0..1.0));
        let back = dct_inverse_blocks(&dct_forward_blocks(&data).unwrap());
        let err = data
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-5, "round trip err {err}");
    }

    #[test]
    fn dc_only_grid_inverts_to_constant() {
        let c = -0.21;
        let mut grid = DctBlockGrid {
            coeffs: Array6::zeros((1, 1, 1, 1, BLOCK, BLOCK)),
        };
        grid.coeffs[[0, 0, 0, 0, 0, 0]] = 8.0 * c;
        let img = dct_inverse_blocks(&grid);
        for v in img.iter() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn non_divisible_sides_rejected() {
        let data = Array4::zeros((1, 3, 12, 16));
        assert!(dct_forward_blocks(&data).is_err());
    }

    #[test]
    fn mask_threshold_counts() {
        // Independent enumeration of pairs with i + j <= t.
        let enumerate = |t: usize| {
            let mut n = 0;
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    if i + j <= t {
                        n += 1;
                    }
                }
            }
            n
        };
        assert_eq!(FrequencyMask::anti_diagonal(14).kept_count(), 64);
        assert_eq!(FrequencyMask::anti_diagonal(0).kept_count(), 1);
        assert_eq!(FrequencyMask::anti_diagonal(8).kept_count(), enumerate(8));
        assert_eq!(enumerate(8), 43);
    }

    #[test]
    fn mask_must_keep_dc() {
        let mut keep = [[true; BLOCK]; BLOCK];
        keep[0][0] = false;
        assert!(FrequencyMask::from_table(keep).is_err());
    }

    #[test]
    fn mask_zeroes_only_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let grid = dct_forward_blocks(&data).unwrap();
        let mask = FrequencyMask::anti_diagonal(4);
        let masked = apply_frequency_mask(&grid, &mask);
        for bi in 0..1 {
            for ci in 0..3 {
                for yb in 0..2 {
                    for xb in 0..2 {
                        for i in 0..BLOCK {
                            for j in 0..BLOCK {
                                let v = masked.coeffs[[bi, ci, yb, xb, i, j]];
                                if mask.keeps(i, j) {
                                    assert_eq!(v, grid.coeffs[[bi, ci, yb, xb, i, j]]);
                                } else {
                                    assert_eq!(v, 0.0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rearrange_token_zero_is_dc_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data = Array4::from_shape_fn((1, 3, 32, 32), |_| rng.gen_range(-1.0..1.0));
        let grid = dct_forward_blocks(&data).unwrap();
        let tokens = band_rearrange(&grid);
        assert_eq!(tokens.dim(), (1, 192, 16));
        for yb in 0..4 {
            for xb in 0..4 {
                assert_eq!(tokens[[0, 0, yb * 4 + xb]], grid.coeffs[[0, 0, yb, xb, 0, 0]]);
            }
        }
    }

    #[test]
    fn rearrange_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data = Array4::from_shape_fn((2, 3, 16, 24), |_| rng.gen_range(-1.0..1.0));
        let grid = dct_forward_blocks(&data).unwrap();
        let back = band_unrearrange(&band_rearrange(&grid), grid.blocks_y(), grid.blocks_x());
        assert_eq!(back.coeffs, grid.coeffs);
    }
}
