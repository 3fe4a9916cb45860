//! 2-D convolution via im2col + matrix multiply.

use ndarray::{Array2, Array4, Ix1};
#[cfg(test)]
use ndarray::Ix4;
use rand::Rng;

use super::{Param, Trainable};

/// Convolution with weight `[out, in, k, k]`, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights, same-padding for odd kernels at stride 1.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            w: Param::he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            b: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// Zero-initialized residual head.
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv2d {
            w: Param::zeros(&[out_ch, in_ch, kernel, kernel]),
            b: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<f64>, b: usize, oh: usize, ow: usize) -> Array2<f64> {
        let (_, c, h, w) = x.dim();
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[b, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, gcols: &Array2<f64>, gx: &mut Array4<f64>, b: usize, oh: usize, ow: usize) {
        let (_, c, h, w) = gx.dim();
        let k = self.kernel;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[[b, ci, iy as usize, ix as usize]] += gcols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }

    fn w2(&self) -> Array2<f64> {
        let k = self.kernel;
        self.w
            .value
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * k * k))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bs, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let w2 = self.w2();
        let bias = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array4::zeros((bs, self.out_ch, oh, ow));
        for b in 0..bs {
            let cols = self.im2col(x, b, oh, ow);
            let out = w2.dot(&cols);
            for o in 0..self.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        y[[b, o, oy, ox]] = out[[o, oy * ow + ox]] + bias[o];
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter grads and returns dL/dx.
    pub fn backward(&mut self, x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let (bs, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let w2 = self.w2();
        let mut gw = Array2::<f64>::zeros((self.out_ch, self.in_ch * k * k));
        let mut gb = vec![0.0f64; self.out_ch];
        let mut gx = Array4::zeros(x.raw_dim());
        for b in 0..bs {
            let cols = self.im2col(x, b, oh, ow);
            let mut gy2 = Array2::zeros((self.out_ch, oh * ow));
            for o in 0..self.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gy[[b, o, oy, ox]];
                        gy2[[o, oy * ow + ox]] = g;
                        gb[o] += g;
                    }
                }
            }
            gw = gw + gy2.dot(&cols.t());
            let gcols = w2.t().dot(&gy2);
            self.col2im(&gcols, &mut gx, b, oh, ow);
        }
        {
            let mut wg = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.out_ch, self.in_ch * k * k))
                .unwrap();
            wg += &gw;
            let mut bg = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for (i, g) in gb.iter().enumerate() {
                bg[i] += g;
            }
        }
        gx
    }

    /// Direct (loop) convolution used only as a test oracle.
    #[cfg(test)]
    pub fn forward_naive(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bs, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let wv = self.w.value.view().into_dimensionality::<Ix4>().unwrap();
        let bias = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array4::zeros((bs, self.out_ch, oh, ow));
        for b in 0..bs {
            for o in 0..self.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for ky in 0..self.kernel {
                                for kx in 0..self.kernel {
                                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += wv[[o, ci, ky, kx]] * x[[b, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[b, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }
}

impl Trainable for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{numeric_grad, rel_err};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn im2col_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1usize, 2] {
            let conv = Conv2d::new(2, 3, 3, stride, &mut rng);
            let x = Array4::from_shape_fn((2, 2, 6, 8), |_| rng.gen_range(-1.0..1.0));
            let fast = conv.forward(&x);
            let slow = conv.forward_naive(&x);
            let err = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-12, "stride {stride}: err {err}");
        }
    }

    #[test]
    fn gradcheck_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 2, 3, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let target = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.gen_range(-1.0..1.0));

        let loss_of = |c: &mut Conv2d| {
            let y = c.forward(&x);
            (&y - &target).mapv(|d| d * d).mean().unwrap()
        };

        conv.zero_grad();
        let y = conv.forward(&x);
        let n = y.len() as f64;
        let gy = (&y - &target).mapv(|d| 2.0 * d / n);
        let gx = conv.backward(&x, &gy);

        for idx in [0usize, 5, 17, 35, 36, 37] {
            let num = numeric_grad(&mut conv, idx, 1e-5, loss_of);
            let ana = crate::nn::get_grad(&conv, idx);
            assert!(rel_err(ana, num) < 1e-5, "param {idx}: {ana} vs {num}");
        }

        // spot-check one input gradient
        let probe = [(0usize, 1usize, 2usize, 3usize)];
        for &(b, c, i, j) in &probe {
            let mut xp = x.clone();
            xp[[b, c, i, j]] += 1e-6;
            let lp = {
                let y = conv.forward(&xp);
                (&y - &target).mapv(|d| d * d).mean().unwrap()
            };
            xp[[b, c, i, j]] -= 2e-6;
            let lm = {
                let y = conv.forward(&xp);
                (&y - &target).mapv(|d| d * d).mean().unwrap()
            };
            let num = (lp - lm) / 2e-6;
            assert!(rel_err(gx[[b, c, i, j]], num) < 1e-4);
        }
    }
}
