//! Binary checkpoint format.
//!
//! ```text
//! "DPCK"  u32 version
//! u32 len, kind (utf-8: "encoder" | "decoder")
//! u32 len, model config (key = value lines)
//! u32 tensor count, then per tensor:
//!     u32 len, name; u32 rank; u64 dims[rank]; u64 element offset
//! u64 element count, f32 payload
//! 32-byte SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data_io::write_atomic;
use crate::error::{invalid, Error, Result};
use crate::model::{Decoder, Encoder, ModelConfig};
use crate::optim::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DPCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Encoder,
    Decoder,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_params<S: Real>(kind: CheckpointKind, config: &ModelConfig, params: &ParamStore<S>) -> Self {
        Self {
            kind,
            config: config.clone(),
            tensors: params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect(),
        }
    }

    pub fn from_encoder<S: Real>(enc: &Encoder<S>) -> Self {
        Self::from_params(CheckpointKind::Encoder, &enc.cfg, &enc.params)
    }

    pub fn from_decoder<S: Real>(dec: &Decoder<S>) -> Self {
        Self::from_params(CheckpointKind::Decoder, &dec.cfg, &dec.params)
    }

    /// Copies every stored tensor into `params`, which must hold exactly the
    /// same names with the same shapes.
    pub fn apply_to<S: Real>(&self, params: &mut ParamStore<S>) -> Result<()> {
        for (name, t) in &self.tensors {
            params.set(name, t.cast())?;
        }
        if let Some((missing, _)) = params.iter().find(|(n, _)| !self.tensors.iter().any(|(m, _)| m == n)) {
            return invalid(format!("checkpoint lacks parameter '{missing}'"));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return invalid(format!("expected a {} checkpoint, found {}", kind.name(), self.kind.name()));
        }
        Ok(())
    }

    pub fn to_encoder<S: Real>(&self) -> Result<Encoder<S>> {
        self.expect_kind(CheckpointKind::Encoder)?;
        let mut enc = Encoder::new(&self.config, 0)?;
        self.apply_to(&mut enc.params)?;
        Ok(enc)
    }

    pub fn to_decoder<S: Real>(&self) -> Result<Decoder<S>> {
        self.expect_kind(CheckpointKind::Decoder)?;
        let mut dec = Decoder::new(&self.config, 0)?;
        self.apply_to(&mut dec.params)?;
        Ok(dec)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, self.kind.name());
        put_str(&mut out, &self.config.to_kv());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing DPCK header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(corrupt("file truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let kind = match r.string()?.as_str() {
            "encoder" => CheckpointKind::Encoder,
            "decoder" => CheckpointKind::Decoder,
            other => return Err(corrupt(&format!("unknown kind '{other}'"))),
        };
        let config = ModelConfig::from_kv(&r.string()?)
            .map_err(|e| corrupt(&format!("bad config snapshot: {e}")))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, dims, offset));
        }
        let total = r.u64()? as usize;
        let payload = r.take(total.checked_mul(4).ok_or_else(|| corrupt("payload size overflow"))?)?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, dims, offset) in manifest {
            let n: usize = dims.iter().product();
            if offset.checked_add(n).is_none_or(|end| end > total) {
                return Err(corrupt(&format!("tensor '{name}' exceeds the payload")));
            }
            let data = payload[offset * 4..(offset + n) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        Ok(Self { kind, config, tensors })
    }
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptCheckpoint(msg.to_string())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("file truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("non-utf8 string"))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(l: usize) -> ModelConfig {
        ModelConfig {
            latent_width: l,
            enc_blocks: 1,
            enc_heads: 2,
            dec_blocks: 1,
            dec_heads: 2,
            num_groups: 4,
            group_size: 4,
            timesteps: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let enc = Encoder::<f32>::new(&toy(8), 3).unwrap();
        let ck = Checkpoint::from_encoder(&enc);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let enc2: Encoder<f32> = back.to_encoder().unwrap();
        assert_eq!(enc2.params, enc.params);
        assert!(back.to_decoder::<f32>().is_err());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let dec = Decoder::<f32>::new(&toy(8), 4).unwrap();
        let ck = Checkpoint::from_decoder(&dec);
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);

        let bytes = ck.to_bytes();
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(Error::CorruptCheckpoint(_))));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn cross_config_load_names_tensor() {
        let big = Checkpoint::from_encoder(&Encoder::<f32>::new(&toy(16), 1).unwrap());
        let mut small = Encoder::<f32>::new(&toy(8), 1).unwrap();
        let err = big.apply_to(&mut small.params).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(err.to_string().contains("encoder.token.fc1.weight"), "{err}");
    }
}
