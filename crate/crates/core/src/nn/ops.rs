//! Stateless tensor operations with forward/backward pairs, plus the
//! scalar loss kernels shared by the training objectives.

use ndarray::{Array2, Array3, Array4, ArrayD};

/// Numerically stable sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn relu_forward<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    gy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu_forward<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    gy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        *g *= d;
    });
    gx
}

/// Mean squared error over all elements.
pub fn mse<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// dMSE/da (gradient w.r.t. the first argument).
pub fn mse_grad<D: ndarray::Dimension>(
    a: &ndarray::Array<f64, D>,
    b: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let n = a.len() as f64;
    let mut g = a.clone();
    ndarray::Zip::from(&mut g).and(b).for_each(|ga, &y| {
        *ga = 2.0 * (*ga - y) / n;
    });
    g
}

/// Mean binary cross-entropy with logits; targets in {0, 1}.
pub fn bce_with_logits(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets.iter())
        .map(|(&z, &t)| t * softplus(-z) + (1.0 - t) * softplus(z))
        .sum::<f64>()
        / n
}

/// Gradient of [`bce_with_logits`] w.r.t. the logits: `(sigma(z) - t) / n`.
pub fn bce_with_logits_grad(logits: &Array2<f64>, targets: &Array2<f64>) -> Array2<f64> {
    let n = logits.len() as f64;
    let mut g = logits.clone();
    ndarray::Zip::from(&mut g).and(targets).for_each(|z, &t| {
        *z = (sigmoid(*z) - t) / n;
    });
    g
}

/// Global average pool `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut y = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += x[[bi, ci, i, j]];
                }
            }
            y[[bi, ci]] = acc / n;
        }
    }
    y
}

pub fn global_avg_pool_backward(gy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = gy.dim();
    let n = (h * w) as f64;
    let mut gx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = gy[[bi, ci]] / n;
            for i in 0..h {
                for j in 0..w {
                    gx[[bi, ci, i, j]] = g;
                }
            }
        }
    }
    gx
}

/// Replicates a message `[B, L]` across space to `[B, L, H, W]`.
pub fn replicate_spatial(msg: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, l) = msg.dim();
    let mut y = Array4::zeros((b, l, h, w));
    for bi in 0..b {
        for li in 0..l {
            let v = msg[[bi, li]];
            for i in 0..h {
                for j in 0..w {
                    y[[bi, li, i, j]] = v;
                }
            }
        }
    }
    y
}

/// Backward of [`replicate_spatial`]: sum over the spatial axes.
pub fn replicate_spatial_backward(gy: &Array4<f64>) -> Array2<f64> {
    let (b, l, h, w) = gy.dim();
    let mut g = Array2::zeros((b, l));
    for bi in 0..b {
        for li in 0..l {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += gy[[bi, li, i, j]];
                }
            }
            g[[bi, li]] = acc;
        }
    }
    g
}

/// Concatenates feature maps along the channel axis.
pub fn concat_channels(parts: &[&Array4<f64>]) -> Array4<f64> {
    let (b, _, h, w) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut y = Array4::zeros((b, total, h, w));
    let mut off = 0;
    for p in parts {
        let c = p.dim().1;
        y.slice_mut(ndarray::s![.., off..off + c, .., ..]).assign(p);
        off += c;
    }
    y
}

/// Splits a channel-axis gradient back into per-part gradients.
pub fn split_channels(gy: &Array4<f64>, sizes: &[usize]) -> Vec<Array4<f64>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &c in sizes {
        out.push(gy.slice(ndarray::s![.., off..off + c, .., ..]).to_owned());
        off += c;
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    y[[bi, ci, 2 * i, 2 * j]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[bi, ci, i, j]] = gy[[bi, ci, 2 * i, 2 * j]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j]]
                        + gy[[bi, ci, 2 * i, 2 * j + 1]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    gx
}

/// Clamp with a saturation mask for the backward pass. Values exactly at a
/// bound count as in-range so an identity-initialized residual path keeps
/// full gradient flow.
pub fn clamp_forward(x: &Array4<f64>, lo: f64, hi: f64) -> (Array4<f64>, Array4<f64>) {
    let y = x.mapv(|v| v.clamp(lo, hi));
    let mask = x.mapv(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 });
    (y, mask)
}

pub fn clamp_backward(gy: &Array4<f64>, mask: &Array4<f64>) -> Array4<f64> {
    gy * mask
}

/// Splits `[B, 3, H, W]` into non-overlapping `P x P` patches,
/// flattened channel-major: `[B, T, 3 * P * P]` with `T = (H/P) * (W/P)`.
pub fn patchify(x: &Array4<f64>, p: usize) -> Array3<f64> {
    let (b, c, h, w) = x.dim();
    let (py, px) = (h / p, w / p);
    let mut y = Array3::zeros((b, py * px, c * p * p));
    for bi in 0..b {
        for ty in 0..py {
            for tx in 0..px {
                let t = ty * px + tx;
                for ci in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            y[[bi, t, (ci * p + i) * p + j]] = x[[bi, ci, ty * p + i, tx * p + j]];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Array3<f64>, c: usize, h: usize, w: usize, p: usize) -> Array4<f64> {
    let b = tokens.dim().0;
    let (py, px) = (h / p, w / p);
    let mut y = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ty in 0..py {
            for tx in 0..px {
                let t = ty * px + tx;
                for ci in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            y[[bi, ci, ty * p + i, tx * p + j]] = tokens[[bi, t, (ci * p + i) * p + j]];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Sum of all elements times corresponding gradient — convenience for
/// dot-product style reductions in backward passes.
pub fn dot_all(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn sigmoid_softplus_stable() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(800.0) == 1.0 || sigmoid(800.0) > 1.0 - 1e-12);
        assert!(sigmoid(-800.0).abs() < 1e-12);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(-30.0) - (-30f64).exp()).abs() < 1e-18);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_closed_form() {
        let z = arr2(&[[0.0, 0.0]]);
        let t = arr2(&[[1.0, 0.0]]);
        assert!((bce_with_logits(&z, &t) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn patchify_round_trip() {
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(b, c, i, j)| {
            (b * 1000 + c * 100 + i * 10 + j) as f64
        });
        let tokens = patchify(&x, 4);
        assert_eq!(tokens.dim(), (2, 4, 48));
        let back = unpatchify(&tokens, 3, 8, 8, 4);
        assert_eq!(back, x);
    }

    #[test]
    fn upsample_round_trip_grad() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, i, j)| (c * 4 + i * 2 + j) as f64);
        let y = upsample2x(&x);
        assert_eq!(y[[0, 0, 3, 3]], x[[0, 0, 1, 1]]);
        let gx = upsample2x_backward(&y);
        assert_eq!(gx[[0, 1, 0, 0]], 4.0 * x[[0, 1, 0, 0]]);
    }

    #[test]
    fn replicate_and_pool_are_adjoint_shapes() {
        let msg = arr2(&[[1.0, -2.0]]);
        let rep = replicate_spatial(&msg, 3, 3);
        assert_eq!(rep[[0, 1, 2, 2]], -2.0);
        let back = replicate_spatial_backward(&rep);
        assert_eq!(back[[0, 0]], 9.0);
        assert_eq!(back[[0, 1]], -18.0);
    }
}
