//! RGB <-> YUV color space conversion (BT.601 analog matrix).

use ndarray::Array4;

use crate::tensor::ImageTensor;

/// Forward BT.601 matrix, rows = (Y, U, V), columns = (R, G, B).
pub const RGB_TO_YUV: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.14713, -0.28886, 0.436],
    [0.615, -0.51499, -0.10001],
];

/// Exact inverse of [`RGB_TO_YUV`], computed by the adjugate formula.
pub fn yuv_to_rgb_matrix() -> [[f64; 3]; 3] {
    invert3(&RGB_TO_YUV)
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
    inv
}

/// Transpose of a 3x3 matrix; the adjoint of a per-pixel linear color map
/// is the transposed map, which backward passes apply to gradients.
pub fn transpose3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

/// Applies a 3x3 matrix to the channel axis of `[B, 3, H, W]` data.
pub fn apply_matrix(data: &Array4<f64>, m: &[[f64; 3]; 3]) -> Array4<f64> {
    let (b, _, h, w) = data.dim();
    let mut out = Array4::zeros((b, 3, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let c0 = data[[bi, 0, y, x]];
                let c1 = data[[bi, 1, y, x]];
                let c2 = data[[bi, 2, y, x]];
                for (r, row) in m.iter().enumerate() {
                    out[[bi, r, y, x]] = row[0] * c0 + row[1] * c1 + row[2] * c2;
                }
            }
        }
    }
    out
}

/// Converts an RGB batch to YUV. Channel order becomes (Y, U, V);
/// gray inputs (R=G=B) map to zero chroma.
pub fn rgb_to_yuv(img: &ImageTensor) -> Array4<f64> {
    apply_matrix(&img.data, &RGB_TO_YUV)
}

/// Converts raw YUV data back to an RGB batch, clamping to the pixel range.
pub fn yuv_to_rgb(yuv: &Array4<f64>) -> ImageTensor {
    let inv = yuv_to_rgb_matrix();
    ImageTensor::from_clamped(apply_matrix(yuv, &inv))
}

/// Same as [`yuv_to_rgb`] but without clamping, for round-trip analysis.
pub fn yuv_to_rgb_unclamped(yuv: &Array4<f64>) -> Array4<f64> {
    apply_matrix(yuv, &yuv_to_rgb_matrix())
}
