//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! "IENC"  u32 version  u64 config_hash  u64 epoch  u64 step  u8 dtype (0 f32, 1 f64)
//! u32 tensor_count
//!   u32 name_len  name (utf-8)  u32 ndim  u64 extent * ndim  element * numel
//! rng: 32-byte seed  u64 stream  u128 word_pos
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"IENC";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: u64,
    /// Epochs completed.
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub rng: RngState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        out.extend(self.config_hash.to_le_bytes());
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.push(match T::DTYPE {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        out.extend(self.rng.seed);
        out.extend(self.rng.stream.to_le_bytes());
        out.extend(self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: "checkpoint".into(),
                found: u32::from_be_bytes(magic.try_into().unwrap()),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let config_hash = r.u64()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let dtype = r.take(1)?[0];
        let want = match T::DTYPE {
            DType::F32 => 0,
            DType::F64 => 1,
        };
        if dtype != want {
            return Err(Error::invalid(format!(
                "checkpoint dtype tag {dtype} does not match {:?}",
                T::DTYPE
            )));
        }
        let count = r.u32()? as usize;
        let width = std::mem::size_of::<T>();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::invalid("checkpoint tensor name is not utf-8"))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Truncated(format!("tensor `{name}` extents overflow")))?;
            let raw = r.take(numel.checked_mul(width).ok_or_else(|| Error::Truncated(name.clone()))?)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.at != bytes.len() {
            return Err(Error::invalid(format!("{} trailing bytes in checkpoint", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            step,
            tensors,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Errors unless the checkpoint was written for a model with `expected`
    /// config hash.
    pub fn check_hash(&self, expected: u64) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::HashMismatch {
                found: self.config_hash,
                expected,
            });
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
