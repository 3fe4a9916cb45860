//! Spatial CNN attack: a plain conv stack predicting a residual.
//!
//! The restricted kernel size keeps the receptive field small
//! (`layers * (kernel - 1) + 1` pixels for the default stack).

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{clamp_backward, clamp_forward, relu_backward, relu_forward};
use crate::nn::{Conv2d, Param, Trainable};
use crate::tensor::{PIXEL_MAX, PIXEL_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnAttackConfig {
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for CnnAttackConfig {
    fn default() -> Self {
        CnnAttackConfig {
            layers: 5,
            channels: 64,
            kernel: 3,
        }
    }
}

impl CnnAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::config("cnn attack needs at least 2 layers"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("cnn attack kernel must be odd"));
        }
        Ok(())
    }

    /// Receptive field of the stack in pixels.
    pub fn receptive_field(&self) -> usize {
        self.layers * (self.kernel - 1) + 1
    }
}

/// Conv/ReLU stack with a zero-initialized final conv; outputs the raw
/// perturbation for its input (no residual add inside).
#[derive(Debug, Clone)]
pub struct CnnStack {
    pub convs: Vec<Conv2d>,
    pub cfg: CnnAttackConfig,
}

pub struct CnnStackCache {
    inputs: Vec<Array4<f64>>,
    pre_relu: Vec<Array4<f64>>,
}

impl CnnStack {
    pub fn new(cfg: CnnAttackConfig, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.layers);
        convs.push(Conv2d::new(in_ch, cfg.channels, cfg.kernel, 1, rng));
        for _ in 0..cfg.layers.saturating_sub(2) {
            convs.push(Conv2d::new(cfg.channels, cfg.channels, cfg.kernel, 1, rng));
        }
        convs.push(Conv2d::zeros(cfg.channels, out_ch, cfg.kernel));
        Ok(CnnStack { convs, cfg })
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, CnnStackCache) {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre_relu = Vec::with_capacity(self.convs.len() - 1);
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            inputs.push(h.clone());
            let y = conv.forward(&h);
            if i + 1 < self.convs.len() {
                pre_relu.push(y.clone());
                h = relu_forward(&y);
            } else {
                h = y;
            }
        }
        (h, CnnStackCache { inputs, pre_relu })
    }

    pub fn backward(&mut self, cache: &CnnStackCache, gy: &Array4<f64>) -> Array4<f64> {
        let last = self.convs.len() - 1;
        let mut g = self.convs[last].backward(&cache.inputs[last], gy);
        for i in (0..last).rev() {
            let gr = relu_backward(&cache.pre_relu[i], &g);
            g = self.convs[i].backward(&cache.inputs[i], &gr);
        }
        g
    }
}

impl Trainable for CnnStack {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in &mut self.convs {
            c.visit_params(f);
        }
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        for c in &self.convs {
            c.for_each_param(f);
        }
    }
}

/// Spatial-domain CNN attack: `clamp(x + stack(x))`.
#[derive(Debug, Clone)]
pub struct CnnAttack {
    pub stack: CnnStack,
}

pub struct CnnAttackCache {
    stack: CnnStackCache,
    clamp_mask: Array4<f64>,
}

impl CnnAttack {
    pub fn new(cfg: CnnAttackConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(CnnAttack {
            stack: CnnStack::new(cfg, 3, 3, rng)?,
        })
    }

    pub fn forward(&self, img: &Array4<f64>) -> (Array4<f64>, CnnAttackCache) {
        let (residual, stack) = self.stack.forward(img);
        let (y, clamp_mask) = clamp_forward(&(img + &residual), PIXEL_MIN, PIXEL_MAX);
        (y, CnnAttackCache { stack, clamp_mask })
    }

    pub fn backward(&mut self, cache: &CnnAttackCache, gy: &Array4<f64>) -> Array4<f64> {
        let g = clamp_backward(gy, &cache.clamp_mask);
        let gres = self.stack.backward(&cache.stack, &g);
        g + gres
    }
}

impl Trainable for CnnAttack {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stack.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        self.stack.for_each_param(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let attack = CnnAttack::new(CnnAttackConfig::default(), &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = attack.forward(&x);
        let err = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn shape_preserved_any_multiple_of_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let attack = CnnAttack::new(
            CnnAttackConfig {
                channels: 8,
                ..CnnAttackConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        for (h, w) in [(8, 8), (16, 24), (32, 8)] {
            let x = Array4::from_shape_fn((1, 3, h, w), |_| rng.gen_range(-1.0..1.0));
            let (y, _) = attack.forward(&x);
            assert_eq!(y.dim(), (1, 3, h, w));
        }
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(CnnAttackConfig::default().receptive_field(), 11);
        let cfg = CnnAttackConfig {
            layers: 3,
            kernel: 5,
            channels: 8,
        };
        assert_eq!(cfg.receptive_field(), 13);
    }

    #[test]
    fn gradcheck_cnn_attack() {
        use crate::nn::testutil::{numeric_grad, rel_err};
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut attack = CnnAttack::new(
            CnnAttackConfig {
                layers: 3,
                channels: 4,
                kernel: 3,
            },
            &mut rng,
        )
        .unwrap();
        // nudge the zero head so gradients flow everywhere
        let probe = attack.param_count() - 50;
        crate::nn::set_param(&mut attack, probe, 0.05);
        let x = Array4::from_shape_fn((1, 3, 6, 6), |_| rng.gen_range(-0.8..0.8));
        let target = Array4::from_shape_fn((1, 3, 6, 6), |_| rng.gen_range(-0.8..0.8));
        let loss_of = |a: &mut CnnAttack| {
            let (y, _) = a.forward(&x);
            (&y - &target).mapv(|d| d * d).mean().unwrap()
        };
        attack.zero_grad();
        let (y, cache) = attack.forward(&x);
        let n = y.len() as f64;
        let gy = (&y - &target).mapv(|d| 2.0 * d / n);
        let _ = attack.backward(&cache, &gy);
        let total = attack.param_count();
        for idx in [0, 11, 100, total / 2, total - 1] {
            let num = numeric_grad(&mut attack, idx, 1e-5, loss_of);
            let ana = crate::nn::get_grad(&attack, idx);
            assert!(rel_err(ana, num) < 1e-4, "param {idx}: {ana} vs {num}");
        }
    }
}
