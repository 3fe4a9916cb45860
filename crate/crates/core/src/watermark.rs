//! Watermark encoder, decoder and discriminator, with the training losses.
//!
//! The encoder spatially replicates the redundant message, concatenates it
//! with image features and the cover itself, and predicts a residual that is
//! added to the cover. The residual head is zero-initialized so the model
//! starts from an exact identity embedding. The decoder pools conv features
//! into redundant logits. A small discriminator supplies the GAN term that
//! keeps watermarked images close to their covers.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{
    bce_with_logits, bce_with_logits_grad, clamp_backward, clamp_forward, concat_channels,
    global_avg_pool, global_avg_pool_backward, mse, mse_grad, relu_backward, relu_forward,
    replicate_spatial, replicate_spatial_backward, softplus, split_channels, upsample2x,
    upsample2x_backward,
};
use crate::nn::{Conv2d, GroupNorm, Linear, Param, Trainable};
use crate::tensor::{ImageTensor, PIXEL_MAX, PIXEL_MIN};

/// Loss weights for the encoder, decoder and attack objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Encoder image-fidelity weight.
    pub enc_mse: f64,
    /// Encoder GAN weight.
    pub enc_gan: f64,
    /// Decoder clean-message weight.
    pub dec_clean: f64,
    /// Decoder adversarial-message weight.
    pub dec_adv: f64,
    /// Attack proximity weight.
    pub adv_img: f64,
    /// Attack decoder-error weight.
    pub adv_msg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            enc_mse: 1.5,
            enc_gan: 0.01,
            dec_clean: 0.3,
            dec_adv: 0.2,
            adv_img: 15.0,
            adv_msg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.enc_mse,
            self.enc_gan,
            self.dec_clean,
            self.dec_adv,
            self.adv_img,
            self.adv_msg,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be non-negative and finite"));
        }
        Ok(())
    }
}

/// Encoder/decoder architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatermarkPreset {
    /// Plain conv stack with message concatenation at full resolution.
    Hidden,
    /// U-Net style encoder with skip connections.
    StegaStamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkConfig {
    pub preset: WatermarkPreset,
    pub image_size: usize,
    pub channels: usize,
    pub redundant_len: usize,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        WatermarkConfig {
            preset: WatermarkPreset::Hidden,
            image_size: 128,
            channels: 32,
            redundant_len: crate::codec::DEFAULT_REDUNDANT_LEN,
        }
    }
}

impl WatermarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 || self.image_size == 0 {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.channels == 0 || self.redundant_len == 0 {
            return Err(Error::config("channels and redundant_len must be positive"));
        }
        Ok(())
    }
}

/// Largest group count from {8, 4, 2, 1} dividing the channel count.
pub(crate) fn auto_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

/// Conv + group norm + ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

pub(crate) struct ConvBlockCache {
    x: Array4<f64>,
    conv_out: Array4<f64>,
    norm_out: Array4<f64>,
}

impl ConvBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_ch, out_ch, 3, stride, rng),
            norm: GroupNorm::new(out_ch, auto_groups(out_ch)),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvBlockCache) {
        let conv_out = self.conv.forward(x);
        let norm_out = self.norm.forward(&conv_out);
        let y = relu_forward(&norm_out);
        (
            y,
            ConvBlockCache {
                x: x.clone(),
                conv_out,
                norm_out,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, gy: &Array4<f64>) -> Array4<f64> {
        let gn = relu_backward(&cache.norm_out, gy);
        let gc = self.norm.backward(&cache.conv_out, &gn);
        self.conv.backward(&cache.x, &gc)
    }
}

impl Trainable for ConvBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.for_each_param(f);
        self.norm.for_each_param(f);
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Plain full-resolution encoder.
#[derive(Debug, Clone)]
pub struct HiddenEncoder {
    pre: Vec<ConvBlock>,
    merge: ConvBlock,
    post: ConvBlock,
    head: Conv2d,
    channels: usize,
    redundant_len: usize,
}

pub struct HiddenEncCache {
    cover: Array4<f64>,
    pre: Vec<ConvBlockCache>,
    merge: ConvBlockCache,
    post: ConvBlockCache,
    clamp_mask: Array4<f64>,
}

impl HiddenEncoder {
    fn new(cfg: &WatermarkConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        HiddenEncoder {
            pre: vec![
                ConvBlock::new(3, c, 1, rng),
                ConvBlock::new(c, c, 1, rng),
                ConvBlock::new(c, c, 1, rng),
            ],
            merge: ConvBlock::new(c + cfg.redundant_len + 3, c, 1, rng),
            post: ConvBlock::new(c, c, 1, rng),
            head: Conv2d::zeros(c, 3, 1),
            channels: c,
            redundant_len: cfg.redundant_len,
        }
    }

    fn forward(&self, cover: &Array4<f64>, msg: &Array2<f64>) -> (Array4<f64>, HiddenEncCache) {
        let (_, _, h, w) = cover.dim();
        let mut feat = cover.clone();
        let mut pre_caches = Vec::with_capacity(self.pre.len());
        for blk in &self.pre {
            let (y, c) = blk.forward(&feat);
            pre_caches.push(c);
            feat = y;
        }
        let msg_planes = replicate_spatial(msg, h, w);
        let cat = concat_channels(&[&feat, &msg_planes, cover]);
        let (merged, merge_cache) = self.merge.forward(&cat);
        drop(cat);
        let (post, post_cache) = self.post.forward(&merged);
        let residual = self.head.forward(&post);
        let (wm, clamp_mask) = clamp_forward(&(cover + &residual), PIXEL_MIN, PIXEL_MAX);
        (
            wm,
            HiddenEncCache {
                cover: cover.clone(),
                pre: pre_caches,
                merge: merge_cache,
                post: post_cache,
                clamp_mask,
            },
        )
    }

    /// Returns (grad_cover, grad_msg).
    fn backward(&mut self, cache: &HiddenEncCache, gy: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let g = clamp_backward(gy, &cache.clamp_mask);
        // residual add: gradient to both cover and head path
        let mut gcover = g.clone();
        let gpost = self.head.backward(&{
            // the head input is post-block output, cached inside post cache's forward value
            relu_forward(&cache.post.norm_out)
        }, &g);
        let gmerged = self.post.backward(&cache.post, &gpost);
        let gcat = self.merge.backward(&cache.merge, &gmerged);
        let parts = split_channels(&gcat, &[self.channels, self.redundant_len, 3]);
        let gmsg = replicate_spatial_backward(&parts[1]);
        gcover += &parts[2];
        let mut gfeat = parts[0].clone();
        for (blk, c) in self.pre.iter_mut().zip(cache.pre.iter()).rev() {
            gfeat = blk.backward(c, &gfeat);
        }
        gcover += &gfeat;
        let _ = &cache.cover;
        (gcover, gmsg)
    }
}

impl Trainable for HiddenEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.pre {
            b.visit_params(f);
        }
        self.merge.visit_params(f);
        self.post.visit_params(f);
        self.head.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.pre {
            b.for_each_param(f);
        }
        self.merge.for_each_param(f);
        self.post.for_each_param(f);
        self.head.for_each_param(f);
    }
}

/// U-Net style encoder: two downsampling stages, skip connections, message
/// injected at the input.
#[derive(Debug, Clone)]
pub struct StegaEncoder {
    e0: ConvBlock,
    e1: ConvBlock,
    e2: ConvBlock,
    u1: ConvBlock,
    u2: ConvBlock,
    head: Conv2d,
    channels: usize,
    redundant_len: usize,
}

pub struct StegaEncCache {
    cover: Array4<f64>,
    cat_in: Array4<f64>,
    e0: ConvBlockCache,
    e1: ConvBlockCache,
    e2: ConvBlockCache,
    up1: Array4<f64>,
    cat1: Array4<f64>,
    u1: ConvBlockCache,
    up2: Array4<f64>,
    cat2: Array4<f64>,
    u2: ConvBlockCache,
    clamp_mask: Array4<f64>,
}

impl StegaEncoder {
    fn new(cfg: &WatermarkConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        StegaEncoder {
            e0: ConvBlock::new(3 + cfg.redundant_len, c, 1, rng),
            e1: ConvBlock::new(c, 2 * c, 2, rng),
            e2: ConvBlock::new(2 * c, 2 * c, 2, rng),
            u1: ConvBlock::new(4 * c, c, 1, rng),
            u2: ConvBlock::new(2 * c, c, 1, rng),
            head: Conv2d::zeros(c, 3, 1),
            channels: c,
            redundant_len: cfg.redundant_len,
        }
    }

    fn forward(&self, cover: &Array4<f64>, msg: &Array2<f64>) -> (Array4<f64>, StegaEncCache) {
        let (_, _, h, w) = cover.dim();
        let msg_planes = replicate_spatial(msg, h, w);
        let cat_in = concat_channels(&[cover, &msg_planes]);
        let (f0, c0) = self.e0.forward(&cat_in);
        let (f1, c1) = self.e1.forward(&f0);
        let (f2, c2) = self.e2.forward(&f1);
        let up1 = upsample2x(&f2);
        let cat1 = concat_channels(&[&up1, &f1]);
        let (g1, cu1) = self.u1.forward(&cat1);
        let up2 = upsample2x(&g1);
        let cat2 = concat_channels(&[&up2, &f0]);
        let (g2, cu2) = self.u2.forward(&cat2);
        let residual = self.head.forward(&g2);
        let (wm, clamp_mask) = clamp_forward(&(cover + &residual), PIXEL_MIN, PIXEL_MAX);
        (
            wm,
            StegaEncCache {
                cover: cover.clone(),
                cat_in,
                e0: c0,
                e1: c1,
                e2: c2,
                up1,
                cat1,
                u1: cu1,
                up2,
                cat2,
                u2: cu2,
                clamp_mask,
            },
        )
    }

    fn backward(&mut self, cache: &StegaEncCache, gy: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let g = clamp_backward(gy, &cache.clamp_mask);
        let mut gcover = g.clone();
        let gg2 = self.head.backward(&relu_forward(&cache.u2.norm_out), &g);
        let gcat2 = self.u2.backward(&cache.u2, &gg2);
        let c = self.channels;
        let parts2 = split_channels(&gcat2, &[c, c]);
        let gg1 = upsample2x_backward(&parts2[0]);
        let mut gf0 = parts2[1].clone();
        let gcat1 = self.u1.backward(&cache.u1, &gg1);
        let parts1 = split_channels(&gcat1, &[2 * c, 2 * c]);
        let gf2 = upsample2x_backward(&parts1[0]);
        let mut gf1 = parts1[1].clone();
        gf1 += &self.e2.backward(&cache.e2, &gf2);
        gf0 += &self.e1.backward(&cache.e1, &gf1);
        let gcat_in = self.e0.backward(&cache.e0, &gf0);
        let parts0 = split_channels(&gcat_in, &[3, self.redundant_len]);
        gcover += &parts0[0];
        let gmsg = replicate_spatial_backward(&parts0[1]);
        let _ = (&cache.cover, &cache.cat_in, &cache.up1, &cache.cat1, &cache.up2, &cache.cat2);
        (gcover, gmsg)
    }
}

impl Trainable for StegaEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.e0.visit_params(f);
        self.e1.visit_params(f);
        self.e2.visit_params(f);
        self.u1.visit_params(f);
        self.u2.visit_params(f);
        self.head.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        self.e0.for_each_param(f);
        self.e1.for_each_param(f);
        self.e2.for_each_param(f);
        self.u1.for_each_param(f);
        self.u2.for_each_param(f);
        self.head.for_each_param(f);
    }
}

/// Either encoder preset behind one interface.
#[derive(Debug, Clone)]
pub enum WmEncoder {
    Hidden(HiddenEncoder),
    Stega(StegaEncoder),
}

pub enum WmEncCache {
    Hidden(HiddenEncCache),
    Stega(StegaEncCache),
}

impl WmEncoder {
    pub fn forward(&self, cover: &Array4<f64>, msg: &Array2<f64>) -> (Array4<f64>, WmEncCache) {
        match self {
            WmEncoder::Hidden(e) => {
                let (y, c) = e.forward(cover, msg);
                (y, WmEncCache::Hidden(c))
            }
            WmEncoder::Stega(e) => {
                let (y, c) = e.forward(cover, msg);
                (y, WmEncCache::Stega(c))
            }
        }
    }

    pub fn backward(&mut self, cache: &WmEncCache, gy: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        match (self, cache) {
            (WmEncoder::Hidden(e), WmEncCache::Hidden(c)) => e.backward(c, gy),
            (WmEncoder::Stega(e), WmEncCache::Stega(c)) => e.backward(c, gy),
            _ => unreachable!("encoder/cache preset mismatch"),
        }
    }
}

impl Trainable for WmEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            WmEncoder::Hidden(e) => e.visit_params(f),
            WmEncoder::Stega(e) => e.visit_params(f),
        }
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            WmEncoder::Hidden(e) => e.for_each_param(f),
            WmEncoder::Stega(e) => e.for_each_param(f),
        }
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Conv stack with three stride-2 stages, a 1x1 projection to one channel
/// per redundant bit, global pooling, and a final linear layer. Projecting
/// before the pool keeps one pooled dimension per message element.
#[derive(Debug, Clone)]
pub struct WmDecoder {
    blocks: Vec<ConvBlock>,
    proj: Conv2d,
    head: Linear,
}

pub struct WmDecCache {
    blocks: Vec<ConvBlockCache>,
    proj_in: Array4<f64>,
    proj_out: Array4<f64>,
    pooled: Array2<f64>,
}

impl WmDecoder {
    fn new(cfg: &WatermarkConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        WmDecoder {
            blocks: vec![
                ConvBlock::new(3, c, 1, rng),
                ConvBlock::new(c, c, 2, rng),
                ConvBlock::new(c, c, 2, rng),
                ConvBlock::new(c, c, 2, rng),
                ConvBlock::new(c, c, 1, rng),
            ],
            proj: Conv2d::new(c, cfg.redundant_len, 1, 1, rng),
            head: Linear::new(cfg.redundant_len, cfg.redundant_len, rng),
        }
    }

    pub fn forward(&self, img: &Array4<f64>) -> (Array2<f64>, WmDecCache) {
        let mut feat = img.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&feat);
            caches.push(c);
            feat = y;
        }
        let proj_out = self.proj.forward(&feat);
        let pooled = global_avg_pool(&proj_out);
        let logits = self.head.forward2(&pooled);
        (
            logits,
            WmDecCache {
                blocks: caches,
                proj_in: feat,
                proj_out,
                pooled,
            },
        )
    }

    pub fn backward(&mut self, cache: &WmDecCache, gy: &Array2<f64>) -> Array4<f64> {
        let gpool = self.head.backward2(&cache.pooled, gy);
        let (_, _, h, w) = cache.proj_out.dim();
        let gproj = global_avg_pool_backward(&gpool, h, w);
        let mut g = self.proj.backward(&cache.proj_in, &gproj);
        for (blk, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = blk.backward(c, &g);
        }
        g
    }
}

impl Trainable for WmDecoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.proj.visit_params(f);
        self.head.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.blocks {
            b.for_each_param(f);
        }
        self.proj.for_each_param(f);
        self.head.for_each_param(f);
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Real/fake classifier over images; one logit per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    blocks: Vec<ConvBlock>,
    head: Linear,
}

pub struct DiscCache {
    blocks: Vec<ConvBlockCache>,
    pooled_in: Array4<f64>,
    pooled: Array2<f64>,
}

impl Discriminator {
    fn new(cfg: &WatermarkConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels.min(32);
        Discriminator {
            blocks: vec![
                ConvBlock::new(3, c, 1, rng),
                ConvBlock::new(c, c, 2, rng),
                ConvBlock::new(c, c, 2, rng),
            ],
            head: Linear::new(c, 1, rng),
        }
    }

    pub fn forward(&self, img: &Array4<f64>) -> (Array2<f64>, DiscCache) {
        let mut feat = img.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&feat);
            caches.push(c);
            feat = y;
        }
        let pooled = global_avg_pool(&feat);
        let logits = self.head.forward2(&pooled);
        (
            logits,
            DiscCache {
                blocks: caches,
                pooled_in: feat,
                pooled,
            },
        )
    }

    pub fn backward(&mut self, cache: &DiscCache, gy: &Array2<f64>) -> Array4<f64> {
        let gpool = self.head.backward2(&cache.pooled, gy);
        let (_, _, h, w) = cache.pooled_in.dim();
        let mut g = global_avg_pool_backward(&gpool, h, w);
        for (blk, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = blk.backward(c, &g);
        }
        g
    }
}

impl Trainable for Discriminator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.blocks {
            b.for_each_param(f);
        }
        self.head.for_each_param(f);
    }
}

// ---------------------------------------------------------------------------
// Model bundle and losses
// ---------------------------------------------------------------------------

/// Encoder, decoder and discriminator with their shared configuration.
#[derive(Debug, Clone)]
pub struct WatermarkModel {
    pub cfg: WatermarkConfig,
    pub encoder: WmEncoder,
    pub decoder: WmDecoder,
    pub disc: Discriminator,
}

impl WatermarkModel {
    pub fn new(cfg: WatermarkConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = match cfg.preset {
            WatermarkPreset::Hidden => WmEncoder::Hidden(HiddenEncoder::new(&cfg, rng)),
            WatermarkPreset::StegaStamp => WmEncoder::Stega(StegaEncoder::new(&cfg, rng)),
        };
        let decoder = WmDecoder::new(&cfg, rng);
        let disc = Discriminator::new(&cfg, rng);
        Ok(WatermarkModel {
            cfg,
            encoder,
            decoder,
            disc,
        })
    }

    /// Embeds a redundant message batch into a cover batch.
    pub fn embed(&self, cover: &ImageTensor, msg: &Array2<f64>) -> Result<ImageTensor> {
        if msg.dim().1 != self.cfg.redundant_len {
            return Err(Error::config(format!(
                "message length {} != decoder length {}",
                msg.dim().1,
                self.cfg.redundant_len
            )));
        }
        if msg.dim().0 != cover.batch() {
            return Err(Error::config("batch size mismatch between cover and message"));
        }
        let (wm, _) = self.encoder.forward(&cover.data, msg);
        Ok(ImageTensor { data: wm })
    }

    /// Embeds one redundant message into a single-image batch.
    pub fn embed_single(
        &self,
        cover: &ImageTensor,
        msg: &crate::codec::RedundantMessage,
    ) -> Result<ImageTensor> {
        let m = Array2::from_shape_vec((1, msg.len()), msg.values.clone())
            .map_err(|e| Error::config(e.to_string()))?;
        self.embed(cover, &m)
    }

    /// Extracts redundant logits; errors with the block index when an
    /// activation goes non-finite.
    pub fn extract(&self, img: &ImageTensor) -> Result<Array2<f64>> {
        let mut feat = img.data.clone();
        for (i, blk) in self.decoder.blocks.iter().enumerate() {
            let (y, _) = blk.forward(&feat);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite activation in decoder block {i}"
                )));
            }
            feat = y;
        }
        let proj = self.decoder.proj.forward(&feat);
        if proj.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite activation in decoder projection"));
        }
        let pooled = global_avg_pool(&proj);
        let logits = self.decoder.head.forward2(&pooled);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite activation in decoder head"));
        }
        Ok(logits)
    }
}

/// Encoder objective: `enc_mse * MSE(cover, watermarked) + enc_gan * L_G`
/// where `L_G` is the non-saturating generator loss on the discriminator's
/// score of the watermarked image.
pub fn encoder_loss(
    cover: &Array4<f64>,
    watermarked: &Array4<f64>,
    disc_logits: &Array2<f64>,
    weights: &LossWeights,
) -> f64 {
    let fid = mse(cover, watermarked);
    let gan: f64 = disc_logits.iter().map(|&z| softplus(-z)).sum::<f64>() / disc_logits.len() as f64;
    weights.enc_mse * fid + weights.enc_gan * gan
}

/// Decoder objective: `dec_clean * MSE(m_dec, m_enc) + dec_adv * MSE(m_adv, m_enc)`.
pub fn decoder_loss(
    m_dec: &Array2<f64>,
    m_adv: &Array2<f64>,
    m_enc: &Array2<f64>,
    weights: &LossWeights,
) -> f64 {
    weights.dec_clean * mse(m_dec, m_enc) + weights.dec_adv * mse(m_adv, m_enc)
}

/// Discriminator objective: mean of the real and fake classification losses,
/// so chance-level scores cost `ln 2` per sample.
pub fn discriminator_loss(real_logits: &Array2<f64>, fake_logits: &Array2<f64>) -> f64 {
    let ones = Array2::ones(real_logits.raw_dim());
    let zeros = Array2::zeros(fake_logits.raw_dim());
    0.5 * (bce_with_logits(real_logits, &ones) + bce_with_logits(fake_logits, &zeros))
}

/// Gradients of [`discriminator_loss`] w.r.t. both logit batches.
pub fn discriminator_loss_grads(
    real_logits: &Array2<f64>,
    fake_logits: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let ones = Array2::ones(real_logits.raw_dim());
    let zeros = Array2::zeros(fake_logits.raw_dim());
    let gr = bce_with_logits_grad(real_logits, &ones).mapv(|g| 0.5 * g);
    let gf = bce_with_logits_grad(fake_logits, &zeros).mapv(|g| 0.5 * g);
    (gr, gf)
}

/// dL/d(watermarked) for the fidelity term plus dL/d(disc logits) for the
/// GAN term of [`encoder_loss`].
pub fn encoder_loss_grads(
    cover: &Array4<f64>,
    watermarked: &Array4<f64>,
    disc_logits: &Array2<f64>,
    weights: &LossWeights,
) -> (Array4<f64>, Array2<f64>) {
    let gimg = mse_grad(watermarked, cover).mapv(|g| g * weights.enc_mse);
    let n = disc_logits.len() as f64;
    let gdisc = disc_logits.mapv(|z| weights.enc_gan * (crate::nn::ops::sigmoid(z) - 1.0) / n);
    (gimg, gdisc)
}

/// Gradients of [`decoder_loss`] w.r.t. the two decoded logit batches.
pub fn decoder_loss_grads(
    m_dec: &Array2<f64>,
    m_adv: &Array2<f64>,
    m_enc: &Array2<f64>,
    weights: &LossWeights,
) -> (Array2<f64>, Array2<f64>) {
    let gd = mse_grad(m_dec, m_enc).mapv(|g| g * weights.dec_clean);
    let ga = mse_grad(m_adv, m_enc).mapv(|g| g * weights.dec_adv);
    (gd, ga)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_hash;
    use ndarray::{Array2, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(preset: WatermarkPreset) -> WatermarkConfig {
        WatermarkConfig {
            preset,
            image_size: 16,
            channels: 8,
            redundant_len: 24,
        }
    }

    fn rand_cover(rng: &mut impl Rng, b: usize, s: usize) -> ImageTensor {
        ImageTensor::new(Array4::from_shape_fn((b, 3, s, s), |_| rng.gen_range(-0.8..0.8))).unwrap()
    }

    #[test]
    fn zero_init_head_embeds_identity() {
        for preset in [WatermarkPreset::Hidden, WatermarkPreset::StegaStamp] {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let model = WatermarkModel::new(small_cfg(preset), &mut rng).unwrap();
            let cover = rand_cover(&mut rng, 2, 16);
            let msg = Array2::from_shape_fn((2, 24), |_| f64::from(rng.gen::<bool>()));
            let wm = model.embed(&cover, &msg).unwrap();
            assert_eq!(wm.data, cover.data, "{preset:?} embeds exactly at init");
        }
    }

    #[test]
    fn embed_preserves_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = WatermarkModel::new(small_cfg(WatermarkPreset::Hidden), &mut rng).unwrap();
        // randomize the head so the residual is non-zero
        model.encoder.visit_params(&mut |p| {
            for v in p.value.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        });
        let cover = rand_cover(&mut rng, 2, 16);
        let msg = Array2::from_shape_fn((2, 24), |_| f64::from(rng.gen::<bool>()));
        let wm = model.embed(&cover, &msg).unwrap();
        assert_eq!(wm.data.dim(), cover.data.dim());
        assert!(wm.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(wm.max_abs_diff(&cover) > 0.0, "non-trivial residual");
    }

    #[test]
    fn different_messages_give_different_marks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = WatermarkModel::new(small_cfg(WatermarkPreset::Hidden), &mut rng).unwrap();
        model.encoder.visit_params(&mut |p| {
            for v in p.value.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        });
        let cover = rand_cover(&mut rng, 1, 16);
        let m1 = Array2::from_shape_fn((1, 24), |_| f64::from(rng.gen::<bool>()));
        let mut m2 = m1.clone();
        m2[[0, 0]] = 1.0 - m2[[0, 0]];
        let w1 = model.embed(&cover, &m1).unwrap();
        let w2 = model.embed(&cover, &m2).unwrap();
        assert!(w1.max_abs_diff(&w2) > 0.0);
    }

    #[test]
    fn extract_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = WatermarkModel::new(small_cfg(WatermarkPreset::Hidden), &mut rng).unwrap();
        let img = rand_cover(&mut rng, 2, 16);
        let logits = model.extract(&img).unwrap();
        assert_eq!(logits.dim(), (2, 24));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_closed_forms() {
        let w = LossWeights::default();
        // identical images, generator-optimal disc score: first term 0
        let cover = Array4::zeros((1, 3, 4, 4));
        let disc = Array2::from_elem((1, 1), 50.0);
        let l = encoder_loss(&cover, &cover, &disc, &w);
        assert!(l < 1e-10);
        // 0.1 uniform offset with default enc_mse 1.5 gives 0.015 plus GAN term
        let wm = Array4::from_elem((1, 3, 4, 4), 0.1);
        let disc0 = Array2::zeros((1, 1));
        let l = encoder_loss(&cover, &wm, &disc0, &w);
        let expect = 1.5 * 0.01 + 0.01 * std::f64::consts::LN_2;
        assert!((l - expect).abs() < 1e-12);
        // zero GAN weight reduces to pure MSE
        let w0 = LossWeights { enc_gan: 0.0, ..w };
        assert!((encoder_loss(&cover, &wm, &disc0, &w0) - 0.015).abs() < 1e-12);

        // decoder loss: both equal target -> 0; adv off by 1 -> dec_adv * 1
        let target = Array2::from_elem((2, 5), 0.5);
        assert_eq!(decoder_loss(&target, &target, &target, &w), 0.0);
        let off = target.mapv(|v| v + 1.0);
        let l = decoder_loss(&target, &off, &target, &w);
        assert!((l - 0.2).abs() < 1e-12);

        // discriminator at chance costs ln 2
        let half = Array2::zeros((4, 1));
        let l = discriminator_loss(&half, &half);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // near-perfect discriminator is near zero
        let real = Array2::from_elem((4, 1), 40.0);
        let fake = Array2::from_elem((4, 1), -40.0);
        assert!(discriminator_loss(&real, &fake) < 1e-10);
    }

    #[test]
    fn encoder_backward_leaves_decoder_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut model = WatermarkModel::new(small_cfg(WatermarkPreset::Hidden), &mut rng).unwrap();
        let cover = rand_cover(&mut rng, 1, 16);
        let msg = Array2::from_shape_fn((1, 24), |_| f64::from(rng.gen::<bool>()));
        let dec_hash = param_hash(&model.decoder);
        let (wm, cache) = model.encoder.forward(&cover.data, &msg);
        let gy = Array4::from_elem(wm.raw_dim(), 1e-3);
        let _ = model.encoder.backward(&cache, &gy);
        assert_eq!(dec_hash, param_hash(&model.decoder));
    }
}
