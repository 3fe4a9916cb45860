//! Group and layer normalization.
//!
//! Group norm is used in place of batch norm throughout the conv nets so
//! that forward passes are independent of batch composition and training
//! runs replay deterministically from checkpoints.

use ndarray::{Array3, Array4, Ix1};

use super::{Param, Trainable};

const EPS: f64 = 1e-5;

/// Per-sample group normalization over `[B, C, H, W]` with affine scale/shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "groups must divide channels");
        GroupNorm {
            gamma: Param::new(ndarray::ArrayD::ones(ndarray::IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
            channels,
            groups,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bs, c, h, w) = x.dim();
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array4::zeros((bs, c, h, w));
        for b in 0..bs {
            for g in 0..self.groups {
                let c0 = g * cg;
                let mut mean = 0.0;
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            mean += x[[b, ci, i, j]];
                        }
                    }
                }
                mean /= n;
                let mut var = 0.0;
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            let d = x[[b, ci, i, j]] - mean;
                            var += d * d;
                        }
                    }
                }
                var /= n;
                let inv = 1.0 / (var + EPS).sqrt();
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            let xh = (x[[b, ci, i, j]] - mean) * inv;
                            y[[b, ci, i, j]] = gamma[ci] * xh + beta[ci];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let (bs, c, h, w) = x.dim();
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut gx = Array4::zeros((bs, c, h, w));
        let mut ggamma = vec![0.0f64; c];
        let mut gbeta = vec![0.0f64; c];
        for b in 0..bs {
            for g in 0..self.groups {
                let c0 = g * cg;
                let mut mean = 0.0;
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            mean += x[[b, ci, i, j]];
                        }
                    }
                }
                mean /= n;
                let mut var = 0.0;
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            let d = x[[b, ci, i, j]] - mean;
                            var += d * d;
                        }
                    }
                }
                var /= n;
                let inv = 1.0 / (var + EPS).sqrt();

                // t = gy * gamma; need mean(t) and mean(t * xhat) over the group
                let mut t_mean = 0.0;
                let mut tx_mean = 0.0;
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            let xh = (x[[b, ci, i, j]] - mean) * inv;
                            let t = gy[[b, ci, i, j]] * gamma[ci];
                            t_mean += t;
                            tx_mean += t * xh;
                            ggamma[ci] += gy[[b, ci, i, j]] * xh;
                            gbeta[ci] += gy[[b, ci, i, j]];
                        }
                    }
                }
                t_mean /= n;
                tx_mean /= n;
                for ci in c0..c0 + cg {
                    for i in 0..h {
                        for j in 0..w {
                            let xh = (x[[b, ci, i, j]] - mean) * inv;
                            let t = gy[[b, ci, i, j]] * gamma[ci];
                            gx[[b, ci, i, j]] = inv * (t - t_mean - xh * tx_mean);
                        }
                    }
                }
            }
        }
        {
            let mut gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let mut gb = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for ci in 0..c {
                gg[ci] += ggamma[ci];
                gb[ci] += gbeta[ci];
            }
        }
        gx
    }
}

impl Trainable for GroupNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
}

/// Layer normalization over the last axis of `[B, T, D]`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(ndarray::ArrayD::ones(ndarray::IxDyn(&[dim]))),
            beta: Param::zeros(&[dim]),
            dim,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (bs, t, d) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array3::zeros((bs, t, d));
        for b in 0..bs {
            for ti in 0..t {
                let row = x.slice(ndarray::s![b, ti, ..]);
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let inv = 1.0 / (var + EPS).sqrt();
                for di in 0..d {
                    y[[b, ti, di]] = gamma[di] * (x[[b, ti, di]] - mean) * inv + beta[di];
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
        let (bs, t, d) = x.dim();
        let n = d as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut gx = Array3::zeros((bs, t, d));
        let mut ggamma = vec![0.0f64; d];
        let mut gbeta = vec![0.0f64; d];
        for b in 0..bs {
            for ti in 0..t {
                let row = x.slice(ndarray::s![b, ti, ..]);
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let inv = 1.0 / (var + EPS).sqrt();
                let mut t_mean = 0.0;
                let mut tx_mean = 0.0;
                for di in 0..d {
                    let xh = (x[[b, ti, di]] - mean) * inv;
                    let tv = gy[[b, ti, di]] * gamma[di];
                    t_mean += tv;
                    tx_mean += tv * xh;
                    ggamma[di] += gy[[b, ti, di]] * xh;
                    gbeta[di] += gy[[b, ti, di]];
                }
                t_mean /= n;
                tx_mean /= n;
                for di in 0..d {
                    let xh = (x[[b, ti, di]] - mean) * inv;
                    let tv = gy[[b, ti, di]] * gamma[di];
                    gx[[b, ti, di]] = inv * (tv - t_mean - xh * tx_mean);
                }
            }
        }
        {
            let mut gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let mut gb = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for di in 0..d {
                gg[di] += ggamma[di];
                gb[di] += gbeta[di];
            }
        }
        gx
    }
}

impl Trainable for LayerNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{numeric_grad, rel_err};
    use ndarray::{Array3, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn groupnorm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gn = GroupNorm::new(4, 2);
        let x = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.gen_range(-2.0..2.0));
        let y = gn.forward(&x);
        // each (sample, group) slab has ~zero mean, ~unit variance
        let slab: Vec<f64> = (0..2)
            .flat_map(|c| {
                let mut v = vec![];
                for i in 0..3 {
                    for j in 0..3 {
                        v.push(y[[0, c, i, j]]);
                    }
                }
                v
            })
            .collect();
        let mean: f64 = slab.iter().sum::<f64>() / slab.len() as f64;
        let var: f64 = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / slab.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gradcheck_groupnorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gn = GroupNorm::new(4, 2);
        // break the symmetry of the affine params
        crate::nn::set_param(&mut gn, 1, 1.3);
        crate::nn::set_param(&mut gn, 6, -0.2);
        let x = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let target = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let loss_of = |g: &mut GroupNorm| {
            let y = g.forward(&x);
            (&y - &target).mapv(|d| d * d).mean().unwrap()
        };
        gn.zero_grad();
        let y = gn.forward(&x);
        let n = y.len() as f64;
        let gy = (&y - &target).mapv(|d| 2.0 * d / n);
        let gx = gn.backward(&x, &gy);
        for idx in 0..8 {
            let num = numeric_grad(&mut gn, idx, 1e-6, loss_of);
            let ana = crate::nn::get_grad(&gn, idx);
            assert!(rel_err(ana, num) < 1e-5, "param {idx}: {ana} vs {num}");
        }
        // input grad
        let mut xp = x.clone();
        xp[[1, 2, 1, 0]] += 1e-6;
        let lp = { (&gn.forward(&xp) - &target).mapv(|d| d * d).mean().unwrap() };
        xp[[1, 2, 1, 0]] -= 2e-6;
        let lm = { (&gn.forward(&xp) - &target).mapv(|d| d * d).mean().unwrap() };
        assert!(rel_err(gx[[1, 2, 1, 0]], (lp - lm) / 2e-6) < 1e-4);
    }

    #[test]
    fn gradcheck_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ln = LayerNorm::new(5);
        crate::nn::set_param(&mut ln, 2, 0.7);
        let x = Array3::from_shape_fn((2, 3, 5), |_| rng.gen_range(-1.0..1.0));
        let target = Array3::from_shape_fn((2, 3, 5), |_| rng.gen_range(-1.0..1.0));
        let loss_of = |l: &mut LayerNorm| {
            let y = l.forward(&x);
            (&y - &target).mapv(|d| d * d).mean().unwrap()
        };
        ln.zero_grad();
        let y = ln.forward(&x);
        let n = y.len() as f64;
        let gy = (&y - &target).mapv(|d| 2.0 * d / n);
        let gx = ln.backward(&x, &gy);
        for idx in 0..10 {
            let num = numeric_grad(&mut ln, idx, 1e-6, loss_of);
            let ana = crate::nn::get_grad(&ln, idx);
            assert!(rel_err(ana, num) < 1e-5, "param {idx}");
        }
        let mut xp = x.clone();
        xp[[0, 1, 3]] += 1e-6;
        let lp = { (&ln.forward(&xp) - &target).mapv(|d| d * d).mean().unwrap() };
        xp[[0, 1, 3]] -= 2e-6;
        let lm = { (&ln.forward(&xp) - &target).mapv(|d| d * d).mean().unwrap() };
        assert!(rel_err(gx[[0, 1, 3]], (lp - lm) / 2e-6) < 1e-4);
    }
}
