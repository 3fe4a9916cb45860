//! Checkpoint serialization: a canonical little-endian binary layout with
//! a JSON metadata header and a trailing SHA-256 checksum. Writing is
//! deterministic, so save -> load -> save produces byte-identical files.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::codec::{ChannelCodec, CodecConfig, MlpCodec, RepetitionCodec};
use crate::error::{Error, Result};
use crate::nn::Trainable;

const MAGIC: &[u8; 4] = b"DMRK";
pub const SCHEMA_VERSION: u32 = 1;

pub const KIND_CODEC: u8 = 1;
pub const KIND_MODEL: u8 = 2;

/// Append-only binary writer.
pub struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    pub fn new(kind: u8) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(SCHEMA_VERSION).unwrap();
        buf.push(kind);
        BlobWriter { buf }
    }

    pub fn push_meta(&mut self, json: &str) {
        self.buf.write_u64::<LittleEndian>(json.len() as u64).unwrap();
        self.buf.extend_from_slice(json.as_bytes());
    }

    pub fn push_tensor(&mut self, t: &ArrayD<f64>) {
        self.buf.push(t.ndim() as u8);
        for &d in t.shape() {
            self.buf.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        self.buf.write_u64::<LittleEndian>(t.len() as u64).unwrap();
        for &v in t.iter() {
            self.buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }

    /// Writes every parameter of a network: value, Adam m, Adam v.
    pub fn push_params<T: Trainable + ?Sized>(&mut self, net: &T) {
        net.for_each_param(&mut |p| {
            self.push_tensor(&p.value);
            self.push_tensor(&p.m);
            self.push_tensor(&p.v);
        });
    }

    /// Appends the checksum and returns the finished bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let digest: [u8; 32] = Sha256::digest(&self.buf).into();
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

/// Checksum-verified reader over a checkpoint blob.
pub struct BlobReader {
    cursor: Cursor<Vec<u8>>,
}

impl BlobReader {
    pub fn open(bytes: Vec<u8>, expected_kind: u8) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 1 + 32 {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        let digest: [u8; 32] = Sha256::digest(body).into();
        if digest != tail {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut cursor = Cursor::new(body.to_vec());
        let mut magic = [0u8; 4];
        cursor.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = cursor.read_u32::<LittleEndian>()?;
        if version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let kind = cursor.read_u8()?;
        if kind != expected_kind {
            return Err(Error::Integrity(format!(
                "checkpoint kind {kind} but expected {expected_kind}"
            )));
        }
        Ok(BlobReader { cursor })
    }

    pub fn read_meta(&mut self) -> Result<String> {
        let len = self.cursor.read_u64::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        self.cursor.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::Integrity("metadata is not utf-8".into()))
    }

    pub fn read_tensor(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.cursor.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.cursor.read_u64::<LittleEndian>()? as usize);
        }
        let count = self.cursor.read_u64::<LittleEndian>()? as usize;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.cursor.read_f64::<LittleEndian>()?);
        }
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Integrity(format!("bad tensor shape: {e}")))
    }

    /// Restores every parameter of a network in visitation order.
    pub fn read_params<T: Trainable + ?Sized>(&mut self, net: &mut T) -> Result<()> {
        let mut err = None;
        net.visit_params(&mut |p| {
            if err.is_some() {
                return;
            }
            for slot in [&mut p.value, &mut p.m, &mut p.v] {
                match self.read_tensor() {
                    Ok(t) if t.shape() == slot.shape() => *slot = t,
                    Ok(t) => {
                        err = Some(Error::Integrity(format!(
                            "parameter shape mismatch: file {:?} vs model {:?}",
                            t.shape(),
                            slot.shape()
                        )))
                    }
                    Err(e) => err = Some(e),
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CodecMeta {
    config: CodecConfig,
    kind: String,
}

/// Serializes a channel codec with its `{msg_len, redundant_len, p_flip,
/// version}` header.
pub fn codec_to_bytes(codec: &ChannelCodec) -> Vec<u8> {
    let meta = CodecMeta {
        config: codec.config().clone(),
        kind: match codec {
            ChannelCodec::Mlp(_) => "mlp".into(),
            ChannelCodec::Repetition(_) => "repetition".into(),
        },
    };
    let mut w = BlobWriter::new(KIND_CODEC);
    w.push_meta(&serde_json::to_string(&meta).expect("meta serializes"));
    if let ChannelCodec::Mlp(m) = codec {
        w.push_params(m);
    }
    w.finish()
}

pub fn codec_from_bytes(bytes: Vec<u8>) -> Result<ChannelCodec> {
    let mut r = BlobReader::open(bytes, KIND_CODEC)?;
    let meta: CodecMeta = serde_json::from_str(&r.read_meta()?)
        .map_err(|e| Error::Integrity(format!("bad codec metadata: {e}")))?;
    match meta.kind.as_str() {
        "mlp" => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut codec = MlpCodec::new(meta.config, &mut rng)?;
            r.read_params(&mut codec)?;
            Ok(ChannelCodec::Mlp(codec))
        }
        "repetition" => Ok(ChannelCodec::Repetition(RepetitionCodec::new(meta.config)?)),
        other => Err(Error::Integrity(format!("unknown codec kind '{other}'"))),
    }
}

pub fn save_codec(codec: &ChannelCodec, path: &Path) -> Result<()> {
    let bytes = codec_to_bytes(codec);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_codec(path: &Path) -> Result<ChannelCodec> {
    codec_from_bytes(std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecTrainConfig, ChannelCodec};

    fn small_codec() -> ChannelCodec {
        let cfg = CodecTrainConfig {
            codec: CodecConfig {
                msg_len: 8,
                redundant_len: 32,
                hidden: 16,
                p_flip: 0.1,
            },
            steps: 10,
            batch: 16,
            lr: 1e-3,
            seed: 1,
        };
        crate::codec::train_codec(&cfg).unwrap().0
    }

    #[test]
    fn codec_round_trip_byte_identical() {
        let codec = small_codec();
        let bytes = codec_to_bytes(&codec);
        let loaded = codec_from_bytes(bytes.clone()).unwrap();
        let bytes2 = codec_to_bytes(&loaded);
        assert_eq!(bytes, bytes2, "save -> load -> save is byte identical");
        assert_eq!(codec.params_hash(), loaded.params_hash());
        // forward agreement, bit exact
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let msgs = ndarray::Array2::from_shape_fn((4, 8), |_| f64::from(rand::Rng::gen::<bool>(&mut rng)));
        assert_eq!(codec.encode_batch(&msgs), loaded.encode_batch(&msgs));
    }

    #[test]
    fn tampered_byte_fails_checksum() {
        let codec = small_codec();
        let mut bytes = codec_to_bytes(&codec);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        match codec_from_bytes(bytes) {
            Err(Error::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_fails() {
        let codec = small_codec();
        let bytes = codec_to_bytes(&codec);
        let cut = bytes[..bytes.len() - 7].to_vec();
        assert!(codec_from_bytes(cut).is_err());
    }

    #[test]
    fn version_mismatch_reported() {
        let codec = small_codec();
        let mut bytes = codec_to_bytes(&codec);
        // bump the version field (offset 4..8) and re-checksum
        bytes[4] = 0xfe;
        let body_len = bytes.len() - 32;
        let digest: [u8; 32] = Sha256::digest(&bytes[..body_len]).into();
        bytes[body_len..].copy_from_slice(&digest);
        match codec_from_bytes(bytes) {
            Err(Error::Version { found, expected }) => {
                assert_eq!(expected, SCHEMA_VERSION);
                assert_ne!(found, SCHEMA_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn repetition_codec_serializes_without_tensors() {
        let codec = ChannelCodec::Repetition(
            crate::codec::RepetitionCodec::new(CodecConfig::default()).unwrap(),
        );
        let bytes = codec_to_bytes(&codec);
        let loaded = codec_from_bytes(bytes).unwrap();
        assert_eq!(codec.params_hash(), loaded.params_hash());
    }
}
