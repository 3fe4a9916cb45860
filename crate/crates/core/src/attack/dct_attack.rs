//! Frequency-domain attack: color conversion, blockwise DCT, frequency
//! masking, a learnable backbone over the coefficients, and the inverse
//! path back to RGB.
//!
//! The pipeline per batch is: RGB -> YUV -> blockwise DCT -> mask ->
//! backbone perturbation -> inverse DCT -> RGB -> clamp. The Transformer
//! backbone sees coefficients rearranged by frequency band (one token per
//! channel/band pair); the CNN backbone sees them laid out as an image
//! plane. The mask bounds both what the backbone observes and where it may
//! write, so the untrained network is an exact identity over the image.

use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color::{apply_matrix, transpose3, yuv_to_rgb_matrix, RGB_TO_YUV};
use crate::dct::{
    apply_frequency_mask, band_rearrange, band_unrearrange, dct_forward_backward,
    dct_forward_blocks, dct_inverse_backward, dct_inverse_blocks, grid_to_plane, plane_to_grid,
    DctBlockGrid, FrequencyMask, BLOCK,
};
use crate::error::{Error, Result};
use crate::nn::attention::EncoderCache;
use crate::nn::ops::{clamp_backward, clamp_forward};
use crate::nn::{Linear, Param, Trainable, TransformerEncoder};
use crate::tensor::{PIXEL_MAX, PIXEL_MIN};

use super::cnn::{CnnAttackConfig, CnnStack, CnnStackCache};
use super::transformer::TransformerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DctBackboneKind {
    Cnn,
    Transformer,
}

/// Transformer over frequency-band tokens: each token is one (channel,
/// band) pair gathered across all blocks, projected from block count to the
/// embedding width and back.
#[derive(Debug, Clone)]
pub struct TokenTransformer {
    pub cfg: TransformerConfig,
    in_proj: Linear,
    pos: Option<Param>,
    encoder: TransformerEncoder,
    out_proj: Linear,
    n_blocks: usize,
}

pub struct TokenTransformerCache {
    tokens: Array3<f64>,
    encoder: EncoderCache,
    enc_out: Array3<f64>,
}

impl TokenTransformer {
    pub fn new(cfg: TransformerConfig, n_blocks: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let n_tokens = 3 * BLOCK * BLOCK;
        let pos = cfg
            .use_positional_embedding
            .then(|| Param::normal(&[n_tokens, cfg.embed_dim], 0.02, rng));
        Ok(TokenTransformer {
            in_proj: Linear::normal(n_blocks, cfg.embed_dim, 0.02, rng),
            pos,
            encoder: TransformerEncoder::new(cfg.embed_dim, cfg.depth, cfg.heads, cfg.mlp_ratio, rng),
            out_proj: Linear::zeros(cfg.embed_dim, n_blocks),
            cfg,
            n_blocks,
        })
    }

    fn forward(&self, tokens: &Array3<f64>) -> (Array3<f64>, TokenTransformerCache) {
        let mut embedded = self.in_proj.forward3(tokens);
        if let Some(pos) = &self.pos {
            let pv = pos.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for mut bt in embedded.outer_iter_mut() {
                bt += &pv;
            }
        }
        let (enc_out, enc_cache) = self.encoder.forward(&embedded);
        let out = self.out_proj.forward3(&enc_out);
        (
            out,
            TokenTransformerCache {
                tokens: tokens.clone(),
                encoder: enc_cache,
                enc_out,
            },
        )
    }

    fn backward(&mut self, cache: &TokenTransformerCache, gy: &Array3<f64>) -> Array3<f64> {
        let genc = self.out_proj.backward3(&cache.enc_out, gy);
        let gemb = self.encoder.backward(&cache.encoder, &genc);
        if let Some(pos) = &mut self.pos {
            let mut pg = pos.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for bg in gemb.outer_iter() {
                pg += &bg;
            }
        }
        self.in_proj.backward3(&cache.tokens, &gemb)
    }
}

impl Trainable for TokenTransformer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.in_proj.visit_params(f);
        if let Some(pos) = &mut self.pos {
            f(pos);
        }
        self.encoder.visit_params(f);
        self.out_proj.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        self.in_proj.for_each_param(f);
        if let Some(pos) = &self.pos {
            f(pos);
        }
        self.encoder.for_each_param(f);
        self.out_proj.for_each_param(f);
    }
}

#[derive(Debug, Clone)]
pub enum DctBackbone {
    Cnn(CnnStack),
    Transformer(TokenTransformer),
}

pub enum DctBackboneCache {
    Cnn(CnnStackCache),
    Transformer(TokenTransformerCache),
}

/// Frequency-domain attack network.
#[derive(Debug, Clone)]
pub struct DctAttack {
    pub backbone: DctBackbone,
    pub mask: FrequencyMask,
    image_size: usize,
}

pub struct DctAttackCache {
    backbone: DctBackboneCache,
    clamp_mask: Array4<f64>,
    blocks_y: usize,
    blocks_x: usize,
}

impl DctAttack {
    /// Builds a DCT-CNN attack. Positional state is irrelevant here.
    pub fn cnn(cfg: CnnAttackConfig, mask: FrequencyMask, image_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if image_size % BLOCK != 0 {
            return Err(Error::config(format!(
                "image size {image_size} must be divisible by {BLOCK}"
            )));
        }
        Ok(DctAttack {
            backbone: DctBackbone::Cnn(CnnStack::new(cfg, 3, 3, rng)?),
            mask,
            image_size,
        })
    }

    /// Builds a DCT-Transformer attack. Positional embeddings default off
    /// for this variant (callers control it via the config).
    pub fn transformer(
        cfg: TransformerConfig,
        mask: FrequencyMask,
        image_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if image_size % BLOCK != 0 {
            return Err(Error::config(format!(
                "image size {image_size} must be divisible by {BLOCK}"
            )));
        }
        let n_blocks = (image_size / BLOCK) * (image_size / BLOCK);
        Ok(DctAttack {
            backbone: DctBackbone::Transformer(TokenTransformer::new(cfg, n_blocks, rng)?),
            mask,
            image_size,
        })
    }

    /// Token length the Transformer backbone was built for.
    pub fn n_blocks(&self) -> Option<usize> {
        match &self.backbone {
            DctBackbone::Transformer(t) => Some(t.n_blocks),
            DctBackbone::Cnn(_) => None,
        }
    }

    pub fn backbone_kind(&self) -> DctBackboneKind {
        match self.backbone {
            DctBackbone::Cnn(_) => DctBackboneKind::Cnn,
            DctBackbone::Transformer(_) => DctBackboneKind::Transformer,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn forward(&self, img: &Array4<f64>) -> (Array4<f64>, DctAttackCache) {
        let yuv = apply_matrix(img, &RGB_TO_YUV);
        let grid = dct_forward_blocks(&yuv).expect("validated divisibility");
        let masked = apply_frequency_mask(&grid, &self.mask);
        let (by, bx) = (grid.blocks_y(), grid.blocks_x());

        let (pert, bb_cache) = match &self.backbone {
            DctBackbone::Cnn(stack) => {
                let plane = grid_to_plane(&masked.coeffs);
                let (out_plane, cache) = stack.forward(&plane);
                (
                    DctBlockGrid {
                        coeffs: plane_to_grid(&out_plane),
                    },
                    DctBackboneCache::Cnn(cache),
                )
            }
            DctBackbone::Transformer(tt) => {
                let tokens = band_rearrange(&masked);
                let (out_tokens, cache) = tt.forward(&tokens);
                (
                    band_unrearrange(&out_tokens, by, bx),
                    DctBackboneCache::Transformer(cache),
                )
            }
        };

        let pert = apply_frequency_mask(&pert, &self.mask);
        let out_grid = DctBlockGrid {
            coeffs: &grid.coeffs + &pert.coeffs,
        };
        let out_yuv = dct_inverse_blocks(&out_grid);
        let rgb = apply_matrix(&out_yuv, &yuv_to_rgb_matrix());
        let (y, clamp_mask) = clamp_forward(&rgb, PIXEL_MIN, PIXEL_MAX);
        (
            y,
            DctAttackCache {
                backbone: bb_cache,
                clamp_mask,
                blocks_y: by,
                blocks_x: bx,
            },
        )
    }

    pub fn backward(&mut self, cache: &DctAttackCache, gy: &Array4<f64>) -> Array4<f64> {
        let g = clamp_backward(gy, &cache.clamp_mask);
        let g_yuv_out = apply_matrix(&g, &transpose3(&yuv_to_rgb_matrix()));
        let g_coeffs = dct_inverse_backward(&g_yuv_out);
        // residual branch
        let mut g_grid = g_coeffs.clone();
        // backbone branch, confined by the mask on both sides
        let g_pert = apply_frequency_mask(&g_coeffs, &self.mask);
        let g_masked = match (&mut self.backbone, &cache.backbone) {
            (DctBackbone::Cnn(stack), DctBackboneCache::Cnn(c)) => {
                let g_plane = grid_to_plane(&g_pert.coeffs);
                let g_in = stack.backward(c, &g_plane);
                DctBlockGrid {
                    coeffs: plane_to_grid(&g_in),
                }
            }
            (DctBackbone::Transformer(tt), DctBackboneCache::Transformer(c)) => {
                let g_tokens = band_rearrange(&g_pert);
                let g_in = tt.backward(c, &g_tokens);
                band_unrearrange(&g_in, cache.blocks_y, cache.blocks_x)
            }
            _ => unreachable!("backbone/cache mismatch"),
        };
        let g_masked = apply_frequency_mask(&g_masked, &self.mask);
        g_grid.coeffs += &g_masked.coeffs;
        let g_yuv_in = dct_forward_backward(&g_grid);
        apply_matrix(&g_yuv_in, &transpose3(&RGB_TO_YUV))
    }
}

impl Trainable for DctAttack {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.backbone {
            DctBackbone::Cnn(s) => s.visit_params(f),
            DctBackbone::Transformer(t) => t.visit_params(f),
        }
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        match &self.backbone {
            DctBackbone::Cnn(s) => s.for_each_param(f),
            DctBackbone::Transformer(t) => t.for_each_param(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_transformer() -> TransformerConfig {
        TransformerConfig {
            depth: 2,
            heads: 2,
            embed_dim: 16,
            patch_size: 8,
            mlp_ratio: 2,
            use_positional_embedding: false,
        }
    }

    #[test]
    fn identity_at_init_with_identity_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let attack = DctAttack::transformer(tiny_transformer(), FrequencyMask::identity(), 16, &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-0.9..0.9));
        let (y, _) = attack.forward(&x);
        let err = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(err < 1e-4, "round-trip err {err}");
    }

    #[test]
    fn identity_at_init_with_default_mask() {
        // the mask bounds where the backbone writes, so an untrained
        // backbone still leaves the image untouched
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for kind in ["cnn", "transformer"] {
            let attack = match kind {
                "cnn" => DctAttack::cnn(
                    CnnAttackConfig {
                        channels: 8,
                        ..CnnAttackConfig::default()
                    },
                    FrequencyMask::default(),
                    16,
                    &mut rng,
                )
                .unwrap(),
                _ => DctAttack::transformer(tiny_transformer(), FrequencyMask::default(), 16, &mut rng).unwrap(),
            };
            let x = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-0.9..0.9));
            let (y, _) = attack.forward(&x);
            let err = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
            assert!(err < 1e-4, "{kind}: err {err}");
        }
    }

    #[test]
    fn masked_bands_zero_before_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-0.9..0.9));
        let yuv = apply_matrix(&x, &RGB_TO_YUV);
        let grid = dct_forward_blocks(&yuv).unwrap();
        let mask = FrequencyMask::default();
        let masked = apply_frequency_mask(&grid, &mask);
        for bi in 0..3 {
            for yb in 0..2 {
                for xb in 0..2 {
                    for i in 0..BLOCK {
                        for j in 0..BLOCK {
                            if !mask.keeps(i, j) {
                                assert_eq!(masked.coeffs[[0, bi, yb, xb, i, j]], 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradcheck_dct_transformer() {
        use crate::nn::testutil::{numeric_grad, rel_err};
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut attack =
            DctAttack::transformer(tiny_transformer(), FrequencyMask::default(), 16, &mut rng).unwrap();
        let total = attack.param_count();
        crate::nn::set_param(&mut attack, total - 3, 0.05);
        let x = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-0.7..0.7));
        let target = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.gen_range(-0.7..0.7));
        let loss_of = |a: &mut DctAttack| {
            let (y, _) = a.forward(&x);
            (&y - &target).mapv(|d| d * d).mean().unwrap()
        };
        attack.zero_grad();
        let (y, cache) = attack.forward(&x);
        let n = y.len() as f64;
        let gy = (&y - &target).mapv(|d| 2.0 * d / n);
        let _ = attack.backward(&cache, &gy);
        for idx in [0, total / 4, total / 2, total - 1] {
            let num = numeric_grad(&mut attack, idx, 1e-5, loss_of);
            let ana = crate::nn::get_grad(&attack, idx);
            assert!(rel_err(ana, num) < 1e-4, "param {idx}: {ana} vs {num}");
        }
    }

    #[test]
    fn gradcheck_dct_cnn_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut attack = DctAttack::cnn(
            CnnAttackConfig {
                layers: 3,
                channels: 4,
                kernel: 3,
            },
            FrequencyMask::default(),
            8,
            &mut rng,
        )
        .unwrap();
        let total = attack.param_count();
        crate::nn::set_param(&mut attack, total - 7, 0.1);
        let x = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.gen_range(-0.7..0.7));
        let target = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.gen_range(-0.7..0.7));
        attack.zero_grad();
        let (y, cache) = attack.forward(&x);
        let n = y.len() as f64;
        let gy = (&y - &target).mapv(|d| 2.0 * d / n);
        let gx = attack.backward(&cache, &gy);
        // finite-difference the input
        for &(c, i, j) in &[(0usize, 3usize, 4usize), (2, 7, 1)] {
            let mut xp = x.clone();
            xp[[0, c, i, j]] += 1e-6;
            let lp = {
                let (y, _) = attack.forward(&xp);
                (&y - &target).mapv(|d| d * d).mean().unwrap()
            };
            xp[[0, c, i, j]] -= 2e-6;
            let lm = {
                let (y, _) = attack.forward(&xp);
                (&y - &target).mapv(|d| d * d).mean().unwrap()
            };
            let num = (lp - lm) / 2e-6;
            let ana = gx[[0, c, i, j]];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-9);
            assert!(rel < 1e-4, "input ({c},{i},{j}): {ana} vs {num}");
        }
    }
}
