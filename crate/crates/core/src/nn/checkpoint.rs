//! Binary checkpoint format.
//!
//! Layout: magic, `u32` version, length-prefixed vocabulary hash,
//! length-prefixed JSON config, `u32` parameter count, then per parameter its
//! name, a frozen flag, rank, dims and little-endian `f32` data. All integers
//! are little-endian.

use std::path::Path;

use thiserror::Error;

use super::params::ParamStore;
use super::Tensor;

pub const MAGIC: &[u8; 8] = b"AFFTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("vocabulary hash mismatch: checkpoint {found}, tokenizer {expected}")]
    VocabMismatch { found: String, expected: String },
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab_hash: String,
    /// Model configuration as JSON.
    pub config: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.vocab_hash);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            put_str(&mut out, &p.name);
            out.push(u8::from(p.frozen));
            out.extend_from_slice(&(p.value.shape.len() as u32).to_le_bytes());
            for &d in &p.value.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &p.value.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let vocab_hash = r.string()?;
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let frozen = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Corrupt(format!("rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|&n| n.saturating_mul(4) <= r.remaining())
                .ok_or_else(|| CheckpointError::Corrupt(format!("bad shape {shape:?} for {name}")))?;
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if params.id(&name).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
            }
            let id = params.add(name, tensor);
            params.get_mut(id).frozen = frozen;
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { vocab_hash, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and rejects a checkpoint built for a different vocabulary.
    pub fn load_for_vocab(path: &Path, expected_hash: &str) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.vocab_hash != expected_hash {
            return Err(CheckpointError::VocabMismatch { found: ck.vocab_hash, expected: expected_hash.to_string() });
        }
        Ok(ck)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Corrupt(format!("need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
        let b = params.add("a.bias", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        params.get_mut(b).frozen = true;
        Checkpoint { vocab_hash: "abc".into(), config: "{\"d\":4}".into(), params }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn rejects_version_and_vocab_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version { found: 9, .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        assert!(matches!(Checkpoint::load_for_vocab(&path, "zzz"), Err(CheckpointError::VocabMismatch { .. })));
        assert!(Checkpoint::load_for_vocab(&path, "abc").is_ok());
    }

    #[test]
    fn truncation_never_panics() {
        let bytes = sample().to_bytes();
        for n in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..n]).is_err());
        }
    }
}
