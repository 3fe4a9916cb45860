//! Fully connected layer.

use ndarray::{Array2, Array3, Axis, Ix1, Ix2};
use rand::Rng;

use super::{Param, Trainable};

/// `y = x W^T + b`, weight shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// He-normal initialization (suits ReLU-family activations).
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::he_normal(&[out_dim, in_dim], in_dim, rng),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// Small-std normal init used inside transformer blocks.
    pub fn normal(in_dim: usize, out_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::normal(&[out_dim, in_dim], std, rng),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialized head: the layer outputs exactly zero until trained.
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Param::zeros(&[out_dim, in_dim]),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, f64> {
        self.w.value.view().into_dimensionality::<Ix2>().expect("2d weight")
    }

    fn b1(&self) -> ndarray::ArrayView1<'_, f64> {
        self.b.value.view().into_dimensionality::<Ix1>().expect("1d bias")
    }

    /// Forward on `[batch, in]`.
    pub fn forward2(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w2().t()) + self.b1()
    }

    /// Backward on `[batch, in]`; accumulates parameter grads, returns dL/dx.
    pub fn backward2(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        let gw = gy.t().dot(x);
        let gb = gy.sum_axis(Axis(0));
        {
            let mut wg = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            wg += &gw;
            let mut bg = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            bg += &gb;
        }
        gy.dot(&self.w2())
    }

    /// Forward on token sequences `[batch, tokens, in]`.
    pub fn forward3(&self, x: &Array3<f64>) -> Array3<f64> {
        let (b, t, d) = x.dim();
        let flat = x
            .view()
            .into_shape_with_order((b * t, d))
            .expect("contiguous tokens");
        let y = flat.dot(&self.w2().t()) + self.b1();
        y.into_shape_with_order((b, t, self.out_dim)).unwrap()
    }

    /// Backward on token sequences.
    pub fn backward3(&mut self, x: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
        let (b, t, d) = x.dim();
        let xf = x.view().into_shape_with_order((b * t, d)).unwrap().to_owned();
        let gf = gy
            .view()
            .into_shape_with_order((b * t, self.out_dim))
            .unwrap()
            .to_owned();
        let gx = self.backward2(&xf, &gf);
        gx.into_shape_with_order((b, t, d)).unwrap()
    }
}

impl Trainable for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Bias1d;
