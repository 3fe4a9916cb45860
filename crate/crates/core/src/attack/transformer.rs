//! Spatial Transformer attack: patch embedding, encoder stack, and a
//! zero-initialized projection back to patch pixels, applied as a residual.

use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::EncoderCache;
use crate::nn::ops::{clamp_backward, clamp_forward, patchify, unpatchify};
use crate::nn::{Linear, Param, Trainable, TransformerEncoder};
use crate::tensor::{PIXEL_MAX, PIXEL_MIN};

/// Transformer attack-network hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub use_positional_embedding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            depth: 6,
            heads: 8,
            embed_dim: 256,
            patch_size: 8,
            mlp_ratio: 4,
            use_positional_embedding: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.embed_dim == 0 {
            return Err(Error::config("transformer depth/heads/embed_dim must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} must be divisible by head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        Ok(())
    }

    /// Per-head key dimensionality.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Spatial-domain Transformer attack.
#[derive(Debug, Clone)]
pub struct TransformerAttack {
    pub cfg: TransformerConfig,
    patch_proj: Linear,
    pos: Option<Param>,
    encoder: TransformerEncoder,
    out_proj: Linear,
    image_size: usize,
}

pub struct TransformerAttackCache {
    input: Array4<f64>,
    tokens: Array3<f64>,
    encoder: EncoderCache,
    enc_out: Array3<f64>,
    clamp_mask: Array4<f64>,
}

impl TransformerAttackCache {
    /// Attention probabilities per block, for inspection in tests.
    pub fn attention_probs(&self) -> Vec<&Array4<f64>> {
        self.encoder.attention_probs()
    }
}

impl TransformerAttack {
    pub fn new(cfg: TransformerConfig, image_size: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if image_size % cfg.patch_size != 0 {
            return Err(Error::config(format!(
                "patch size {} must divide image side {image_size}",
                cfg.patch_size
            )));
        }
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let n_tokens = (image_size / cfg.patch_size) * (image_size / cfg.patch_size);
        let pos = cfg
            .use_positional_embedding
            .then(|| Param::normal(&[n_tokens, cfg.embed_dim], 0.02, rng));
        Ok(TransformerAttack {
            patch_proj: Linear::normal(patch_dim, cfg.embed_dim, 0.02, rng),
            pos,
            encoder: TransformerEncoder::new(cfg.embed_dim, cfg.depth, cfg.heads, cfg.mlp_ratio, rng),
            out_proj: Linear::zeros(cfg.embed_dim, patch_dim),
            cfg,
            image_size,
        })
    }

    pub fn forward(&self, img: &Array4<f64>) -> (Array4<f64>, TransformerAttackCache) {
        let (_, _, h, w) = img.dim();
        let p = self.cfg.patch_size;
        let tokens = patchify(img, p);
        let mut embedded = self.patch_proj.forward3(&tokens);
        if let Some(pos) = &self.pos {
            let pv = pos.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for mut batch_tokens in embedded.outer_iter_mut() {
                batch_tokens += &pv;
            }
        }
        let (enc_out, enc_cache) = self.encoder.forward(&embedded);
        let delta_tokens = self.out_proj.forward3(&enc_out);
        let delta = unpatchify(&delta_tokens, 3, h, w, p);
        let (y, clamp_mask) = clamp_forward(&(img + &delta), PIXEL_MIN, PIXEL_MAX);
        (
            y,
            TransformerAttackCache {
                input: img.clone(),
                tokens,
                encoder: enc_cache,
                enc_out,
                clamp_mask,
            },
        )
    }

    pub fn backward(&mut self, cache: &TransformerAttackCache, gy: &Array4<f64>) -> Array4<f64> {
        let p = self.cfg.patch_size;
        let (_, _, h, w) = cache.input.dim();
        let g = clamp_backward(gy, &cache.clamp_mask);
        let gdelta_tokens = patchify(&g, p);
        let genc_out = self.out_proj.backward3(&cache.enc_out, &gdelta_tokens);
        let gembedded = self.encoder.backward(&cache.encoder, &genc_out);
        if let Some(pos) = &mut self.pos {
            let mut pg = pos.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for batch_grad in gembedded.outer_iter() {
                pg += &batch_grad;
            }
        }
        let gtokens = self.patch_proj.backward3(&cache.tokens, &gembedded);
        let gimg = unpatchify(&gtokens, 3, h, w, p);
        g + gimg
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }
}

impl Trainable for TransformerAttack {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch_proj.visit_params(f);
        if let Some(pos) = &mut self.pos {
            f(pos);
        }
        self.encoder.visit_params(f);
        self.out_proj.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        self.patch_proj.for_each_param(f);
        if let Some(pos) = &self.pos {
            f(pos);
        }
        self.encoder.for_each_param(f);
        self.out_proj.for_each_param(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            depth: 2,
            heads: 2,
            embed_dim: 16,
            patch_size: 8,
            mlp_ratio: 2,
            use_positional_embedding: true,
        }
    }

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let attack = TransformerAttack::new(tiny_cfg(), 16, &mut rng).unwrap();
        let x = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = attack.forward(&x);
        let err = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn attention_rows_normalized_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let attack = TransformerAttack::new(tiny_cfg(), 24, &mut rng).unwrap();
        let x = Array4::from_shape_fn((2, 3, 24, 24), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = attack.forward(&x);
        for probs in cache.attention_probs() {
            let (b, heads, t, _) = probs.dim();
            for bi in 0..b {
                for h in 0..heads {
                    for i in 0..t {
                        let row: f64 = (0..t).map(|j| probs[[bi, h, i, j]]).sum();
                        assert!((row - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_head_split_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let cfg = TransformerConfig {
            heads: 12,
            embed_dim: 256,
            ..TransformerConfig::default()
        };
        assert!(TransformerAttack::new(cfg, 128, &mut rng).is_err());
    }

    #[test]
    fn gradcheck_through_attack() {
        use crate::nn::testutil::{numeric_grad, rel_err};
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut attack = TransformerAttack::new(tiny_cfg(), 16, &mut rng).unwrap();
        let total = attack.param_count();
        crate::nn::set_param(&mut attack, total - 5, 0.03);
        let x = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-0.8..0.8));
        let target = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-0.8..0.8));
        let loss_of = |a: &mut TransformerAttack| {
            let (y, _) = a.forward(&x);
            (&y - &target).mapv(|d| d * d).mean().unwrap()
        };
        attack.zero_grad();
        let (y, cache) = attack.forward(&x);
        let n = y.len() as f64;
        let gy = (&y - &target).mapv(|d| 2.0 * d / n);
        let _ = attack.backward(&cache, &gy);
        for idx in [0, 57, total / 3, 2 * total / 3, total - 1] {
            let num = numeric_grad(&mut attack, idx, 1e-5, loss_of);
            let ana = crate::nn::get_grad(&attack, idx);
            assert!(rel_err(ana, num) < 1e-4, "param {idx}: {ana} vs {num}");
        }
    }
}
