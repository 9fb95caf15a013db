//! Binary checkpoint: named little-endian `f64` tensors plus a JSON config.
//!
//! Layout:
//!
//! ```text
//! "FGQA"            magic
//! u32               format version
//! u64               seed
//! u64 + bytes       config JSON
//! u32               tensor count
//! per tensor:
//!   u32 + bytes     name (UTF-8)
//!   u8              1 = trainable, 0 = buffer
//!   u32             rank
//!   u64 * rank      dims
//!   f64 * numel     row-major data
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"FGQA";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name:?} has dimensions {dims:?} that overflow or exceed the file")]
    DimensionOverflow { name: String, dims: Vec<u64> },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config blob: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, seed: u64, config: Value) -> Self {
        let tensors = store
            .ids()
            .map(|id| NamedTensor {
                name: store.name(id).to_string(),
                trainable: store.is_trainable(id),
                tensor: store.value(id).clone(),
            })
            .collect();
        Self {
            seed,
            config,
            tensors,
        }
    }

    /// Parameter store with the same names, order and kinds.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            if t.trainable {
                store.add(t.name.clone(), t.tensor.clone());
            } else {
                store.add_buffer(t.name.clone(), t.tensor.clone());
            }
        }
        store
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(too_many)?.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&u32::try_from(name.len()).map_err(too_many)?.to_le_bytes());
            out.extend_from_slice(name);
            out.push(u8::from(t.trainable));
            let shape = t.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let seed = r.u64("seed")?;
        let cfg_len = r.u64("config length")?;
        let cfg_len = usize::try_from(cfg_len)
            .ok()
            .filter(|&n| n <= r.remaining())
            .ok_or(CheckpointError::Truncated("config"))?;
        let config = serde_json::from_slice(r.take(cfg_len, "config")?)?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let trainable = match r.take(1, "tensor kind")?[0] {
                0 => false,
                1 => true,
                k => return Err(CheckpointError::Malformed(format!("tensor {name:?} has kind byte {k}"))),
            };
            let rank = r.u32("tensor rank")? as usize;
            if rank > MAX_RANK {
                return Err(CheckpointError::Malformed(format!("tensor {name:?} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("tensor dims")?);
            }
            let overflow = || CheckpointError::DimensionOverflow {
                name: name.clone(),
                dims: dims.clone(),
            };
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .and_then(|b| usize::try_from(b).ok())
                .ok_or_else(overflow)?;
            if numel > r.remaining() {
                return Err(if numel > bytes.len() {
                    overflow()
                } else {
                    CheckpointError::Truncated("tensor data")
                });
            }
            let data = r
                .take(numel, "tensor data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let shape = dims.iter().map(|&d| d as usize).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push(NamedTensor {
                name,
                trainable,
                tensor,
            });
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Self {
            seed,
            config,
            tensors,
        })
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn too_many(_: std::num::TryFromIntError) -> CheckpointError {
    CheckpointError::Malformed("field exceeds u32 range".into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("w", Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -2.25]).unwrap());
        store.add_buffer("bn.running_var", Tensor::ones(1, 3));
        Checkpoint::from_store(&store, 42, serde_json::json!({"kind": "test"}))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for (a, b) in ck.tensors.iter().zip(&back.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(back.to_store(), ParamStore::clone(&ck.to_store()));
    }

    #[test]
    fn corruptions_are_distinguished() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
    }
}
