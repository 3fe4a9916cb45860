//! Multi-head self-attention and pre-norm transformer encoder blocks.

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;

use super::ops::{gelu_backward, gelu_forward};
use super::{LayerNorm, Linear, Param, Trainable};

const INIT_STD: f64 = 0.02;

/// Multi-head self-attention: per head
/// `softmax(Q K^T / sqrt(d_k)) V`, heads concatenated then projected.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
    pub dk: usize,
}

pub struct MhsaCache {
    x: Array3<f64>,
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    ctx: Array3<f64>,
    /// Attention probabilities `[batch, head, query, key]`; rows sum to 1.
    pub probs: Array4<f64>,
}

impl Mhsa {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "embed dim must be divisible by heads");
        Mhsa {
            wq: Linear::normal(dim, dim, INIT_STD, rng),
            wk: Linear::normal(dim, dim, INIT_STD, rng),
            wv: Linear::normal(dim, dim, INIT_STD, rng),
            wo: Linear::normal(dim, dim, INIT_STD, rng),
            heads,
            dim,
            dk: dim / heads,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, MhsaCache) {
        let (b, t, _) = x.dim();
        let q = self.wq.forward3(x);
        let k = self.wk.forward3(x);
        let v = self.wv.forward3(x);
        let scale = 1.0 / (self.dk as f64).sqrt();
        let mut ctx = Array3::zeros((b, t, self.dim));
        let mut probs = Array4::zeros((b, self.heads, t, t));
        for bi in 0..b {
            for h in 0..self.heads {
                let lo = h * self.dk;
                let hi = lo + self.dk;
                let qh = q.slice(s![bi, .., lo..hi]);
                let kh = k.slice(s![bi, .., lo..hi]);
                let vh = v.slice(s![bi, .., lo..hi]);
                let mut scores: Array2<f64> = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                // row softmax with max subtraction
                for mut row in scores.rows_mut() {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|s| (s - mx).exp());
                    let sum: f64 = row.iter().sum();
                    row.mapv_inplace(|s| s / sum);
                }
                let oh = scores.dot(&vh);
                ctx.slice_mut(s![bi, .., lo..hi]).assign(&oh);
                probs.slice_mut(s![bi, h, .., ..]).assign(&scores);
            }
        }
        let y = self.wo.forward3(&ctx);
        (
            y,
            MhsaCache {
                x: x.clone(),
                q,
                k,
                v,
                ctx,
                probs,
            },
        )
    }

    pub fn backward(&mut self, cache: &MhsaCache, gy: &Array3<f64>) -> Array3<f64> {
        let (b, t, _) = cache.x.dim();
        let scale = 1.0 / (self.dk as f64).sqrt();
        let gctx = self.wo.backward3(&cache.ctx, gy);
        let mut gq = Array3::zeros((b, t, self.dim));
        let mut gk = Array3::zeros((b, t, self.dim));
        let mut gv = Array3::zeros((b, t, self.dim));
        for bi in 0..b {
            for h in 0..self.heads {
                let lo = h * self.dk;
                let hi = lo + self.dk;
                let qh = cache.q.slice(s![bi, .., lo..hi]);
                let kh = cache.k.slice(s![bi, .., lo..hi]);
                let vh = cache.v.slice(s![bi, .., lo..hi]);
                let p = cache.probs.slice(s![bi, h, .., ..]);
                let goh = gctx.slice(s![bi, .., lo..hi]);
                let gp = goh.dot(&vh.t());
                let gvh = p.t().dot(&goh);
                // softmax backward per row
                let mut gs = Array2::zeros((t, t));
                for i in 0..t {
                    let mut dot = 0.0;
                    for j in 0..t {
                        dot += gp[[i, j]] * p[[i, j]];
                    }
                    for j in 0..t {
                        gs[[i, j]] = p[[i, j]] * (gp[[i, j]] - dot) * scale;
                    }
                }
                let gqh = gs.dot(&kh);
                let gkh = gs.t().dot(&qh);
                gq.slice_mut(s![bi, .., lo..hi]).assign(&gqh);
                gk.slice_mut(s![bi, .., lo..hi]).assign(&gkh);
                gv.slice_mut(s![bi, .., lo..hi]).assign(&gvh);
            }
        }
        let gx_q = self.wq.backward3(&cache.x, &gq);
        let gx_k = self.wk.backward3(&cache.x, &gk);
        let gx_v = self.wv.backward3(&cache.x, &gv);
        gx_q + gx_k + gx_v
    }
}

impl Trainable for Mhsa {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        self.wq.for_each_param(f);
        self.wk.for_each_param(f);
        self.wv.for_each_param(f);
        self.wo.for_each_param(f);
    }
}

/// Pre-norm transformer encoder block: attention and MLP sub-layers with
/// residual connections.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    x: Array3<f64>,
    attn: MhsaCache,
    h: Array3<f64>,
    b: Array3<f64>,
    f1: Array3<f64>,
    g: Array3<f64>,
}

impl BlockCache {
    pub fn attention_probs(&self) -> &Array4<f64> {
        &self.attn.probs
    }
}

impl TransformerBlock {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: Mhsa::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::normal(dim, dim * mlp_ratio, INIT_STD, rng),
            fc2: Linear::normal(dim * mlp_ratio, dim, INIT_STD, rng),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BlockCache) {
        let a = self.ln1.forward(x);
        let (sa, attn) = self.attn.forward(&a);
        drop(a);
        let h = x + &sa;
        let b = self.ln2.forward(&h);
        let f1 = self.fc1.forward3(&b);
        let g = gelu_forward(&f1);
        let f2 = self.fc2.forward3(&g);
        let y = &h + &f2;
        (
            y,
            BlockCache {
                x: x.clone(),
                attn,
                h,
                b,
                f1,
                g,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache, gy: &Array3<f64>) -> Array3<f64> {
        let gg = self.fc2.backward3(&cache.g, gy);
        let gf1 = gelu_backward(&cache.f1, &gg);
        let gb = self.fc1.backward3(&cache.b, &gf1);
        let gh = gy + &self.ln2.backward(&cache.h, &gb);
        let ga = self.attn.backward(&cache.attn, &gh);
        &gh + &self.ln1.backward(&cache.x, &ga)
    }
}

impl Trainable for TransformerBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_params(f);
        self.attn.visit_params(f);
        self.ln2.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        self.ln1.for_each_param(f);
        self.attn.for_each_param(f);
        self.ln2.for_each_param(f);
        self.fc1.for_each_param(f);
        self.fc2.for_each_param(f);
    }
}

/// Stack of transformer blocks with a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    h_final: Array3<f64>,
}

impl EncoderCache {
    /// Attention probabilities of every block, `[batch, head, query, key]`.
    pub fn attention_probs(&self) -> Vec<&Array4<f64>> {
        self.blocks.iter().map(|b| b.attention_probs()).collect()
    }
}

impl TransformerEncoder {
    pub fn new(dim: usize, depth: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        TransformerEncoder {
            blocks: (0..depth).map(|_| TransformerBlock::new(dim, heads, mlp_ratio, rng)).collect(),
            ln_f: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, EncoderCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&h);
            caches.push(c);
            h = y;
        }
        let y = self.ln_f.forward(&h);
        (
            y,
            EncoderCache {
                blocks: caches,
                h_final: h,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncoderCache, gy: &Array3<f64>) -> Array3<f64> {
        let mut g = self.ln_f.backward(&cache.h_final, gy);
        for (blk, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = blk.backward(c, &g);
        }
        g
    }
}

impl Trainable for TransformerEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.ln_f.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.blocks {
            b.for_each_param(f);
        }
        self.ln_f.for_each_param(f);
    }
}
