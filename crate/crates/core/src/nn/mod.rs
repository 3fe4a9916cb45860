//! Minimal 64-bit neural-network kernel: explicit layers with hand-written
//! backward passes, Adam with decoupled weight decay, and parameter
//! visitation for optimizers, hashing, and checkpointing.
//!
//! Forward methods are pure given frozen parameters; backward methods
//! accumulate into each parameter's `grad` buffer and return the gradient
//! with respect to the layer input.

pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;

pub use attention::{Mhsa, TransformerBlock, TransformerEncoder};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{GroupNorm, LayerNorm};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// One trainable tensor together with its gradient accumulator and
/// Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        Param { value, grad, m, v }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// He (Kaiming) normal init for ReLU fan-in.
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Param::normal(shape, std, rng)
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng));
        Param::new(value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything holding trainable parameters.
///
/// `visit_params` must enumerate parameters in a stable order; checkpoints
/// and the optimizer both rely on it.
pub trait Trainable {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    fn for_each_param(&self, f: &mut dyn FnMut(&Param));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.len());
        n
    }
}

/// SHA-256 over the little-endian bytes of every parameter value, in
/// visitation order. Used by the optimizer-partition checks.
pub fn param_hash<T: Trainable + ?Sized>(net: &T) -> [u8; 32] {
    let mut hasher = Sha256::new();
    net.for_each_param(&mut |p| {
        for &v in p.value.iter() {
            hasher.update(v.to_le_bytes());
        }
    });
    hasher.finalize().into()
}

/// Reads the flat `idx`-th scalar parameter (visitation order).
pub fn get_param<T: Trainable + ?Sized>(net: &T, idx: usize) -> f64 {
    let mut out = None;
    let mut off = 0;
    net.for_each_param(&mut |p| {
        if out.is_none() && idx < off + p.len() {
            out = Some(p.value.as_slice().expect("contiguous")[idx - off]);
        }
        off += p.len();
    });
    out.expect("param index in range")
}

/// Writes the flat `idx`-th scalar parameter (visitation order).
pub fn set_param<T: Trainable + ?Sized>(net: &mut T, idx: usize, value: f64) {
    let mut off = 0;
    let mut done = false;
    net.visit_params(&mut |p| {
        if !done && idx < off + p.len() {
            p.value.as_slice_mut().expect("contiguous")[idx - off] = value;
            done = true;
        }
        off += p.len();
    });
    assert!(done, "param index in range");
}

/// Reads the flat `idx`-th scalar gradient (visitation order).
pub fn get_grad<T: Trainable + ?Sized>(net: &T, idx: usize) -> f64 {
    let mut out = None;
    let mut off = 0;
    net.for_each_param(&mut |p| {
        if out.is_none() && idx < off + p.len() {
            out = Some(p.grad.as_slice().expect("contiguous")[idx - off]);
        }
        off += p.len();
    });
    out.expect("grad index in range")
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
        }
    }

    pub fn with_weight_decay(lr: f64, weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            ..Adam::new(lr)
        }
    }

    /// Applies one update from the accumulated gradients, then leaves the
    /// gradients untouched (callers zero them at the start of each phase).
    pub fn step<T: Trainable + ?Sized>(&mut self, net: &mut T) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        net.visit_params(&mut |p| {
            let g = p.grad.as_slice().expect("contiguous");
            let m = p.m.as_slice_mut().expect("contiguous");
            let v = p.v.as_slice_mut().expect("contiguous");
            let x = p.value.as_slice_mut().expect("contiguous");
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / b1c;
                let vhat = v[i] / b2c;
                x[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * x[i]);
            }
        });
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite difference of `loss` with respect to flat param `idx`.
    pub fn numeric_grad<T, F>(net: &mut T, idx: usize, eps: f64, mut loss: F) -> f64
    where
        T: Trainable,
        F: FnMut(&mut T) -> f64,
    {
        let orig = get_param(net, idx);
        set_param(net, idx, orig + eps);
        let lp = loss(net);
        set_param(net, idx, orig - eps);
        let lm = loss(net);
        set_param(net, idx, orig);
        (lp - lm) / (2.0 * eps)
    }

    /// Relative error between analytic and numeric gradients, guarded
    /// against the both-near-zero case.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-7 {
            0.0
        } else {
            (analytic - numeric).abs() / denom
        }
    }
}
