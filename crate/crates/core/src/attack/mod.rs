//! Learnable attack networks: spatial CNN and Transformer, plus
//! blockwise-DCT frequency-domain variants of both.
//!
//! Every attack is a residual map with a zero-initialized head, so an
//! untrained network reproduces its input (up to transform round trips)
//! and early adversarial training stays stable.

pub mod cnn;
pub mod dct_attack;
pub mod transformer;

pub use cnn::{CnnAttack, CnnAttackConfig};
pub use dct_attack::{DctAttack, DctBackboneKind};
pub use transformer::{TransformerAttack, TransformerConfig};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ops::{mse, mse_grad};
use crate::nn::{Param, Trainable};
use crate::tensor::ImageTensor;
use crate::watermark::LossWeights;

/// Which attack backbone/domain combination a network implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Cnn,
    Transformer,
    DctCnn,
    DctTransformer,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(AttackKind::Cnn),
            "transformer" => Ok(AttackKind::Transformer),
            "dct-cnn" => Ok(AttackKind::DctCnn),
            "dct-transformer" => Ok(AttackKind::DctTransformer),
            other => Err(crate::error::Error::config(format!(
                "unknown attack network '{other}' (expected cnn|transformer|dct-cnn|dct-transformer)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Cnn => "cnn",
            AttackKind::Transformer => "transformer",
            AttackKind::DctCnn => "dct-cnn",
            AttackKind::DctTransformer => "dct-transformer",
        }
    }
}

/// Any attack network behind one forward/backward interface.
#[derive(Debug, Clone)]
pub enum AttackNet {
    Cnn(CnnAttack),
    Transformer(TransformerAttack),
    Dct(DctAttack),
}

pub enum AttackCache {
    Cnn(cnn::CnnAttackCache),
    Transformer(transformer::TransformerAttackCache),
    Dct(dct_attack::DctAttackCache),
}

impl AttackNet {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackNet::Cnn(_) => AttackKind::Cnn,
            AttackNet::Transformer(_) => AttackKind::Transformer,
            AttackNet::Dct(d) => match d.backbone_kind() {
                DctBackboneKind::Cnn => AttackKind::DctCnn,
                DctBackboneKind::Transformer => AttackKind::DctTransformer,
            },
        }
    }

    pub fn forward(&self, img: &Array4<f64>) -> (Array4<f64>, AttackCache) {
        match self {
            AttackNet::Cnn(n) => {
                let (y, c) = n.forward(img);
                (y, AttackCache::Cnn(c))
            }
            AttackNet::Transformer(n) => {
                let (y, c) = n.forward(img);
                (y, AttackCache::Transformer(c))
            }
            AttackNet::Dct(n) => {
                let (y, c) = n.forward(img);
                (y, AttackCache::Dct(c))
            }
        }
    }

    pub fn backward(&mut self, cache: &AttackCache, gy: &Array4<f64>) -> Array4<f64> {
        match (self, cache) {
            (AttackNet::Cnn(n), AttackCache::Cnn(c)) => n.backward(c, gy),
            (AttackNet::Transformer(n), AttackCache::Transformer(c)) => n.backward(c, gy),
            (AttackNet::Dct(n), AttackCache::Dct(c)) => n.backward(c, gy),
            _ => unreachable!("attack net/cache kind mismatch"),
        }
    }

    /// Inference pass returning a range-clamped image batch.
    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let (y, _) = self.forward(&img.data);
        ImageTensor { data: y }
    }
}

impl Trainable for AttackNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            AttackNet::Cnn(n) => n.visit_params(f),
            AttackNet::Transformer(n) => n.visit_params(f),
            AttackNet::Dct(n) => n.visit_params(f),
        }
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            AttackNet::Cnn(n) => n.for_each_param(f),
            AttackNet::Transformer(n) => n.for_each_param(f),
            AttackNet::Dct(n) => n.for_each_param(f),
        }
    }
}

/// Attack objective:
/// `adv_img * MSE(I_adv, I_w) - adv_msg * MSE(M_adv, M_enc)`.
///
/// The attack step minimizes this, trading decoder damage against staying
/// close to the watermarked image; it may be negative.
pub fn adversarial_loss(
    adv: &Array4<f64>,
    wm: &Array4<f64>,
    m_adv: &Array2<f64>,
    m_enc: &Array2<f64>,
    weights: &LossWeights,
) -> f64 {
    weights.adv_img * mse(adv, wm) - weights.adv_msg * mse(m_adv, m_enc)
}

/// Gradients of [`adversarial_loss`] w.r.t. the adversarial image (direct
/// proximity term) and the adversarial logits (decoder-error term).
pub fn adversarial_loss_grads(
    adv: &Array4<f64>,
    wm: &Array4<f64>,
    m_adv: &Array2<f64>,
    m_enc: &Array2<f64>,
    weights: &LossWeights,
) -> (Array4<f64>, Array2<f64>) {
    let gimg = mse_grad(adv, wm).mapv(|g| g * weights.adv_img);
    let gmsg = mse_grad(m_adv, m_enc).mapv(|g| -g * weights.adv_msg);
    (gimg, gmsg)
}
