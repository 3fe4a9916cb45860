//! Channel coding: expands a short binary message into a redundant
//! representation so the downstream decoder tolerates bit errors.
//!
//! The learned codec is a two-layer MLP encoder/decoder pair trained
//! against a binary symmetric channel, independently of the watermarking
//! model. A non-learned repetition code sits behind the same interface and
//! serves as an analytically checkable oracle.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{relu_backward, relu_forward, sigmoid, softplus};
use crate::nn::{Adam, Linear, Param, Trainable};
use crate::rng::{SeedStream, StreamRole};

/// Logit clamp applied before the cross-entropy logs.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Default message length.
pub const DEFAULT_MSG_LEN: usize = 30;
/// Default redundant length (factor 4).
pub const DEFAULT_REDUNDANT_LEN: usize = 120;

/// The original binary watermark message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::config("message bits must be 0 or 1"));
        }
        Ok(BitMessage { bits })
    }

    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        BitMessage {
            bits: (0..len).map(|_| rng.gen_range(0..=1u8)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_f64(&self) -> Array1<f64> {
        Array1::from_iter(self.bits.iter().map(|&b| b as f64))
    }

    /// Packs bits MSB-first into hex, e.g. for the CLI.
    pub fn to_hex(&self) -> String {
        let mut out = String::new();
        for chunk in self.bits.chunks(4) {
            let mut v = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                v |= b << (3 - i);
            }
            out.push_str(&format!("{v:x}"));
        }
        out
    }

    /// Parses hex into exactly `len` bits (MSB-first).
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for ch in hex.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::config(format!("invalid hex digit '{ch}'")))? as u8;
            for i in (0..4).rev() {
                bits.push((v >> i) & 1);
            }
        }
        if bits.len() < len {
            return Err(Error::config(format!(
                "hex message has {} bits, need {len}",
                bits.len()
            )));
        }
        bits.truncate(len);
        BitMessage::new(bits)
    }
}

/// The redundant representation passing through the watermark pipeline:
/// logits before binarization, bits (0.0/1.0) after thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundantMessage {
    pub values: Vec<f64>,
}

impl RedundantMessage {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("redundant message contains non-finite values"));
        }
        Ok(RedundantMessage { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Thresholds values at 0.5 into hard bits; exactly 0.5 maps to 0.
    pub fn to_bits(&self) -> Vec<u8> {
        self.values.iter().map(|&v| u8::from(v > 0.5)).collect()
    }
}

/// Thresholds a redundant-value batch at 0.5 into {0.0, 1.0}.
/// Idempotent: applying it twice equals applying it once.
pub fn binarize_batch(values: &Array2<f64>) -> Array2<f64> {
    values.mapv(|v| f64::from(v > 0.5))
}

/// Codec hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub msg_len: usize,
    pub redundant_len: usize,
    /// Bit-flip probability of the training channel; must lie in [0, 0.5).
    pub p_flip: f64,
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            msg_len: DEFAULT_MSG_LEN,
            redundant_len: DEFAULT_REDUNDANT_LEN,
            p_flip: 0.1,
            hidden: 256,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.msg_len == 0 || self.redundant_len < self.msg_len {
            return Err(Error::config(format!(
                "redundant length {} must be >= message length {}",
                self.redundant_len, self.msg_len
            )));
        }
        if !(0.0..0.5).contains(&self.p_flip) {
            return Err(Error::config(format!(
                "p_flip {} outside [0, 0.5)",
                self.p_flip
            )));
        }
        Ok(())
    }
}

/// Two-layer MLP channel encoder and decoder.
#[derive(Debug, Clone)]
pub struct MlpCodec {
    pub cfg: CodecConfig,
    pub enc1: Linear,
    pub enc2: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
}

impl MlpCodec {
    pub fn new(cfg: CodecConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(MlpCodec {
            enc1: Linear::new(cfg.msg_len, cfg.hidden, rng),
            enc2: Linear::new(cfg.hidden, cfg.redundant_len, rng),
            dec1: Linear::new(cfg.redundant_len, cfg.hidden, rng),
            dec2: Linear::new(cfg.hidden, cfg.msg_len, rng),
            cfg,
        })
    }

    /// Encoder logits for a batch of messages `[B, msg_len]`.
    pub fn encode_logits(&self, msgs: &Array2<f64>) -> Array2<f64> {
        let h = relu_forward(&self.enc1.forward2(msgs));
        self.enc2.forward2(&h)
    }

    /// Decoder logits for a batch of redundant vectors `[B, redundant_len]`.
    pub fn decode_logits(&self, redundant: &Array2<f64>) -> Array2<f64> {
        let h = relu_forward(&self.dec1.forward2(redundant));
        self.dec2.forward2(&h)
    }
}

impl Trainable for MlpCodec {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.enc1.visit_params(f);
        self.enc2.visit_params(f);
        self.dec1.visit_params(f);
        self.dec2.visit_params(f);
    }
    fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        self.enc1.for_each_param(f);
        self.enc2.for_each_param(f);
        self.dec1.for_each_param(f);
        self.dec2.for_each_param(f);
    }
}

/// Non-learned repetition code: the redundant message is the concatenation
/// of `factor` copies of the original; decoding is a per-bit majority vote
/// with ties broken to 0.
#[derive(Debug, Clone)]
pub struct RepetitionCodec {
    pub cfg: CodecConfig,
    pub factor: usize,
}

impl RepetitionCodec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.redundant_len % cfg.msg_len != 0 {
            return Err(Error::config(format!(
                "repetition codec needs msg_len {} to divide redundant_len {}",
                cfg.msg_len, cfg.redundant_len
            )));
        }
        let factor = cfg.redundant_len / cfg.msg_len;
        Ok(RepetitionCodec { cfg, factor })
    }
}

/// The swappable channel codec interface.
#[derive(Debug, Clone)]
pub enum ChannelCodec {
    Mlp(MlpCodec),
    Repetition(RepetitionCodec),
}

impl ChannelCodec {
    pub fn config(&self) -> &CodecConfig {
        match self {
            ChannelCodec::Mlp(m) => &m.cfg,
            ChannelCodec::Repetition(r) => &r.cfg,
        }
    }

    /// Expands one message into its binarized redundant form.
    pub fn encode_redundant(&self, msg: &BitMessage) -> Result<RedundantMessage> {
        let cfg = self.config();
        if msg.len() != cfg.msg_len {
            return Err(Error::config(format!(
                "message length {} != configured {}",
                msg.len(),
                cfg.msg_len
            )));
        }
        let batch = msg.to_f64().insert_axis(ndarray::Axis(0));
        let out = self.encode_batch(&batch);
        RedundantMessage::new(out.row(0).to_vec())
    }

    /// Batch encode `[B, msg_len] -> [B, redundant_len]`, output in {0.0, 1.0}.
    pub fn encode_batch(&self, msgs: &Array2<f64>) -> Array2<f64> {
        match self {
            ChannelCodec::Mlp(m) => m.encode_logits(msgs).mapv(|z| f64::from(sigmoid(z) > 0.5)),
            ChannelCodec::Repetition(r) => {
                let (b, l) = msgs.dim();
                let mut out = Array2::zeros((b, r.cfg.redundant_len));
                for bi in 0..b {
                    for copy in 0..r.factor {
                        for i in 0..l {
                            out[[bi, copy * l + i]] = msgs[[bi, i]];
                        }
                    }
                }
                out
            }
        }
    }

    /// Recovers the original bits from a (possibly noisy) redundant vector.
    /// Thresholding rule: `sigmoid(logit) > 0.5 -> 1`, ties to 0.
    pub fn decode_redundant(&self, redundant: &RedundantMessage) -> Result<BitMessage> {
        let cfg = self.config();
        if redundant.len() != cfg.redundant_len {
            return Err(Error::config(format!(
                "redundant length {} != configured {}",
                redundant.len(),
                cfg.redundant_len
            )));
        }
        if redundant.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("redundant message contains non-finite values"));
        }
        let batch = Array2::from_shape_vec((1, redundant.len()), redundant.values.clone()).unwrap();
        let bits = self.decode_batch(&batch);
        BitMessage::new(bits.row(0).iter().map(|&v| v as u8).collect())
    }

    /// Batch decode to hard bits `[B, msg_len]` in {0.0, 1.0}.
    pub fn decode_batch(&self, redundant: &Array2<f64>) -> Array2<f64> {
        self.decode_soft(redundant).mapv(|p| f64::from(p > 0.5))
    }

    /// Batch decode to per-bit confidences in (0, 1).
    pub fn decode_soft(&self, redundant: &Array2<f64>) -> Array2<f64> {
        match self {
            ChannelCodec::Mlp(m) => m.decode_logits(redundant).mapv(sigmoid),
            ChannelCodec::Repetition(r) => {
                let (b, _) = redundant.dim();
                let l = r.cfg.msg_len;
                let mut out = Array2::zeros((b, l));
                for bi in 0..b {
                    for i in 0..l {
                        let mut acc = 0.0;
                        for copy in 0..r.factor {
                            acc += redundant[[bi, copy * l + i]];
                        }
                        out[[bi, i]] = acc / r.factor as f64;
                    }
                }
                out
            }
        }
    }

    /// SHA-256 of the codec parameters (repetition codecs hash their config).
    pub fn params_hash(&self) -> [u8; 32] {
        match self {
            ChannelCodec::Mlp(m) => crate::nn::param_hash(m),
            ChannelCodec::Repetition(r) => {
                use sha2::{Digest, Sha256};
                let mut h = Sha256::new();
                h.update(b"repetition");
                h.update((r.cfg.msg_len as u64).to_le_bytes());
                h.update((r.cfg.redundant_len as u64).to_le_bytes());
                h.finalize().into()
            }
        }
    }
}

/// Channel-coding loss: mean binary cross-entropy between the original
/// message bits and the recovered logits (clamped to +/-[`LOGIT_CLAMP`]).
pub fn channel_loss(original: &BitMessage, recovered_logits: &[f64]) -> Result<f64> {
    if original.len() != recovered_logits.len() {
        return Err(Error::config(format!(
            "loss lengths differ: {} vs {}",
            original.len(),
            recovered_logits.len()
        )));
    }
    let n = original.len() as f64;
    let mut acc = 0.0;
    for (&m, &z) in original.bits().iter().zip(recovered_logits) {
        let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        // -[m ln sigma(z) + (1-m) ln(1-sigma(z))]
        acc += if m == 1 { softplus(-z) } else { softplus(z) };
    }
    Ok(acc / n)
}

fn channel_loss_batch(logits: &Array2<f64>, targets: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((i, j), &z) in logits.indexed_iter() {
        let zc = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let t = targets[[i, j]];
        loss += t * softplus(-zc) + (1.0 - t) * softplus(zc);
        // clamp is a pass-through for |z| < LOGIT_CLAMP, zero outside
        let dz = if z.abs() < LOGIT_CLAMP { (sigmoid(zc) - t) / n } else { 0.0 };
        grad[[i, j]] = dz;
    }
    (loss / n, grad)
}

/// Flips each bit of a {0,1}-valued batch independently with probability `p`.
pub fn binary_symmetric_channel(bits: &Array2<f64>, p: f64, rng: &mut impl Rng) -> Array2<f64> {
    bits.mapv(|b| {
        if rng.gen::<f64>() < p {
            1.0 - b
        } else {
            b
        }
    })
}

/// Codec training settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CodecTrainConfig {
    pub codec: CodecConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            codec: CodecConfig::default(),
            steps: 8000,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Summary of a codec training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CodecTrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    /// Per-bit accuracy on held-out messages through a noiseless channel.
    pub clean_accuracy: f64,
}

fn random_messages(batch: usize, len: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((batch, len), |_| f64::from(rng.gen::<bool>()))
}

/// Per-bit accuracy of `decode(encode(m))` over `n` random messages.
pub fn clean_decode_accuracy(codec: &ChannelCodec, n: usize, rng: &mut impl Rng) -> f64 {
    let l = codec.config().msg_len;
    let mut correct = 0usize;
    let mut total = 0usize;
    let chunk = 512;
    let mut left = n;
    while left > 0 {
        let b = left.min(chunk);
        let msgs = random_messages(b, l, rng);
        let decoded = codec.decode_batch(&codec.encode_batch(&msgs));
        for (a, d) in msgs.iter().zip(decoded.iter()) {
            if (a - d).abs() < 0.5 {
                correct += 1;
            }
            total += 1;
        }
        left -= b;
    }
    correct as f64 / total as f64
}

/// Trains the MLP codec against a binary symmetric channel with a
/// straight-through gradient through the binarization and noise.
///
/// Stops early once a held-out probe reaches perfect clean accuracy twice
/// in a row. Errors with the offending step index if the loss diverges.
pub fn train_codec(cfg: &CodecTrainConfig) -> Result<(ChannelCodec, CodecTrainReport)> {
    cfg.codec.validate()?;
    let mut init_rng = SeedStream::new(cfg.seed, StreamRole::WeightInit);
    let mut data_rng = SeedStream::new(cfg.seed, StreamRole::Messages);
    let mut chan_rng = SeedStream::new(cfg.seed, StreamRole::Channel);
    let mut eval_rng = SeedStream::new(cfg.seed, StreamRole::Eval);

    let mut codec = MlpCodec::new(cfg.codec.clone(), &mut init_rng)?;
    let mut opt = Adam::new(cfg.lr);
    let mut final_loss = f64::NAN;
    let mut steps_run = 0;
    let mut perfect_probes = 0usize;

    for step in 0..cfg.steps {
        let msgs = random_messages(cfg.batch, cfg.codec.msg_len, &mut data_rng);

        // forward
        let h1_pre = codec.enc1.forward2(&msgs);
        let h1 = relu_forward(&h1_pre);
        let z = codec.enc2.forward2(&h1);
        let probs = z.mapv(sigmoid);
        let hard = binarize_batch(&probs);
        let noisy = binary_symmetric_channel(&hard, cfg.codec.p_flip, &mut chan_rng);
        let h2_pre = codec.dec1.forward2(&noisy);
        let h2 = relu_forward(&h2_pre);
        let y = codec.dec2.forward2(&h2);

        let (loss, gy) = channel_loss_batch(&y, &msgs);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: "channel loss diverged (non-finite)".into(),
            });
        }
        final_loss = loss;
        steps_run = step + 1;

        // backward
        codec.zero_grad();
        let gh2 = codec.dec2.backward2(&h2, &gy);
        let gh2_pre = relu_backward(&h2_pre, &gh2);
        let gnoisy = codec.dec1.backward2(&noisy, &gh2_pre);
        // straight-through: binarize+flip treated as sigmoid locally
        let gz = ndarray::Zip::from(&gnoisy)
            .and(&probs)
            .map_collect(|&g, &p| g * p * (1.0 - p));
        let gh1 = codec.enc2.backward2(&h1, &gz);
        let gh1_pre = relu_backward(&h1_pre, &gh1);
        let _ = codec.enc1.backward2(&msgs, &gh1_pre);
        opt.step(&mut codec);

        // early-stop probe every 250 steps
        if (step + 1) % 250 == 0 {
            let probe = ChannelCodec::Mlp(codec.clone());
            let acc = clean_decode_accuracy(&probe, 2048, &mut eval_rng);
            if acc == 1.0 {
                perfect_probes += 1;
                if perfect_probes >= 2 {
                    break;
                }
            } else {
                perfect_probes = 0;
            }
        }
    }

    let trained = ChannelCodec::Mlp(codec);
    let clean_accuracy = clean_decode_accuracy(&trained, 10_000, &mut eval_rng);
    Ok((
        trained,
        CodecTrainReport {
            steps_run,
            final_loss,
            clean_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn repetition_default() -> ChannelCodec {
        ChannelCodec::Repetition(RepetitionCodec::new(CodecConfig::default()).unwrap())
    }

    #[test]
    fn hex_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = BitMessage::random(30, &mut rng);
            let hex = m.to_hex();
            let back = BitMessage::from_hex(&hex, 30).unwrap();
            assert_eq!(m, back);
        }
    }

    #[test]
    fn repetition_encode_is_concatenated_copies() {
        let codec = repetition_default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = BitMessage::random(30, &mut rng);
        let r = codec.encode_redundant(&m).unwrap();
        assert_eq!(r.len(), 120);
        for copy in 0..4 {
            for i in 0..30 {
                assert_eq!(r.values[copy * 30 + i], m.bits()[i] as f64);
            }
        }
    }

    #[test]
    fn repetition_majority_recovers_under_flips() {
        let codec = repetition_default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = BitMessage::random(30, &mut rng);
            let r = codec.encode_redundant(&m).unwrap();
            let arr = Array2::from_shape_vec((1, 120), r.values.clone()).unwrap();
            // flip exactly one copy of every bit: majority is still 3-1
            let mut noisy = arr.clone();
            for i in 0..30 {
                noisy[[0, i]] = 1.0 - noisy[[0, i]];
            }
            let back = codec
                .decode_redundant(&RedundantMessage::new(noisy.row(0).to_vec()).unwrap())
                .unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn repetition_matches_independent_majority_oracle() {
        // Oracle: count votes per bit position directly.
        let codec = repetition_default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let m = BitMessage::random(30, &mut rng);
            let enc = codec.encode_redundant(&m).unwrap();
            let noisy: Vec<f64> = enc
                .values
                .iter()
                .map(|&b| if rng.gen::<f64>() < 0.1 { 1.0 - b } else { b })
                .collect();
            let decoded = codec
                .decode_redundant(&RedundantMessage::new(noisy.clone()).unwrap())
                .unwrap();
            for i in 0..30 {
                let votes: f64 = (0..4).map(|c| noisy[c * 30 + i]).sum();
                let oracle = u8::from(votes / 4.0 > 0.5);
                assert_eq!(decoded.bits()[i], oracle);
            }
        }
    }

    #[test]
    fn all_zero_logit_input_thresholds_to_zero() {
        // sigmoid(0) = 0.5 which is not > 0.5, so ties resolve to 0.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CodecConfig::default();
        let mlp = MlpCodec::new(cfg, &mut rng).unwrap();
        let zeros = Array2::zeros((1, 30));
        let bits = zeros.mapv(|z: f64| f64::from(sigmoid(z) > 0.5));
        assert!(bits.iter().all(|&b| b == 0.0));
        // decoding an all-zero redundant vector produces valid bits
        let codec = ChannelCodec::Mlp(mlp);
        let out = codec
            .decode_redundant(&RedundantMessage::new(vec![0.0; 120]).unwrap())
            .unwrap();
        assert_eq!(out.len(), 30);
    }

    #[test]
    fn binarize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((4, 120), |_| rng.gen_range(-2.0..2.0));
        let once = binarize_batch(&x);
        let twice = binarize_batch(&once);
        assert_eq!(once, twice);
        // and decoding binarized input is invariant under re-binarization
        let codec = repetition_default();
        assert_eq!(codec.decode_batch(&once), codec.decode_batch(&twice));
    }

    #[test]
    fn channel_loss_closed_forms() {
        let ones = BitMessage::new(vec![1; 30]).unwrap();
        // saturated correct logits
        let loss = channel_loss(&ones, &[20.0; 30]).unwrap();
        assert!(loss <= 1e-8, "saturated loss {loss}");
        // uninformative logits
        let loss = channel_loss(&ones, &[0.0; 30]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        // sigma^{-1}(0.9) on the correct bit gives -ln 0.9
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = BitMessage::random(30, &mut rng);
        let z90 = (0.9f64 / 0.1).ln();
        let logits: Vec<f64> = m.bits().iter().map(|&b| if b == 1 { z90 } else { -z90 }).collect();
        let loss = channel_loss(&m, &logits).unwrap();
        assert!((loss - (-(0.9f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn channel_loss_zero_iff_saturated() {
        let tol = 1e-11;
        let ones = BitMessage::new(vec![1; 30]).unwrap();
        let sat = channel_loss(&ones, &[LOGIT_CLAMP; 30]).unwrap();
        assert!(sat < tol);
        // one bit far from saturation keeps the loss above tolerance
        let mut logits = vec![LOGIT_CLAMP; 30];
        logits[7] = 20.0;
        let near = channel_loss(&ones, &logits).unwrap();
        assert!(near > tol);
        // wrong-sign saturation is very expensive
        logits[7] = -LOGIT_CLAMP;
        assert!(channel_loss(&ones, &logits).unwrap() > 0.5);
    }

    #[test]
    fn channel_loss_length_mismatch() {
        let m = BitMessage::new(vec![0; 30]).unwrap();
        assert!(channel_loss(&m, &[0.0; 29]).is_err());
    }

    #[test]
    fn p_flip_half_rejected() {
        let cfg = CodecConfig {
            p_flip: 0.5,
            ..CodecConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = CodecConfig {
            p_flip: 0.0,
            ..CodecConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn repetition_accuracy_non_increasing_in_flip_rate() {
        let codec = repetition_default();
        let mut accs = Vec::new();
        for (si, &p) in [0.0, 0.05, 0.1, 0.2].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + si as u64);
            let msgs = random_messages(10_000, 30, &mut rng);
            let enc = codec.encode_batch(&msgs);
            let noisy = binary_symmetric_channel(&enc, p, &mut rng);
            let dec = codec.decode_batch(&noisy);
            let correct = msgs
                .iter()
                .zip(dec.iter())
                .filter(|(a, d)| (**a - **d).abs() < 0.5)
                .count();
            accs.push(correct as f64 / msgs.len() as f64);
        }
        assert_eq!(accs[0], 1.0);
        for w in accs.windows(2) {
            assert!(w[0] >= w[1], "accuracy increased with noise: {accs:?}");
        }
    }

    #[test]
    fn encode_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let codec = ChannelCodec::Mlp(MlpCodec::new(CodecConfig::default(), &mut rng).unwrap());
        let m = BitMessage::random(30, &mut rng);
        let a = codec.encode_redundant(&m).unwrap();
        let b = codec.encode_redundant(&m).unwrap();
        assert_eq!(a, b);
    }
}
