//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field | bytes |
//! |---|---|
//! | magic `SRDITCKP` | 8 |
//! | format version (`u32`) | 4 |
//! | header length (`u64`) + UTF-8 header text | 8 + n |
//! | tensor count (`u32`) | 4 |
//! | per tensor: name length (`u32`), name, rank (`u32`), dims (`u64` each), values (`f64` each) | |
//! | SHA-256 of every preceding byte | 32 |

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::Module;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"SRDITCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint integrity check failed: checksum mismatch")]
    Checksum,
    #[error("checkpoint truncated or malformed at byte {0}")]
    Truncated(usize),
    #[error("checkpoint has no tensor named {0}")]
    Missing(String),
    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form text, by convention the run configuration.
    pub header: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_module<M: Module + Clone>(header: impl Into<String>, model: &M) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.to_vec() })
            .collect();
        Checkpoint { header: header.into(), tensors }
    }

    /// Replaces every parameter of `model` with the stored values, keeping
    /// each parameter's trainable flag.
    pub fn load_into<M: Module>(&self, model: &mut M) -> Result<(), CheckpointError> {
        let mut err = None;
        model.visit_params("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.iter().find(|n| n.name == name) {
                None => err = Some(CheckpointError::Missing(name)),
                Some(n) if n.shape != t.shape() => {
                    err = Some(CheckpointError::Shape { name, found: n.shape.clone(), expected: t.shape().to_vec() })
                }
                Some(n) => {
                    *t = Tensor::new(n.data.clone(), &n.shape).expect("shape checked").with_grad(t.requires_grad());
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(CheckpointError::Checksum);
        }
        let hlen = r.u64()? as usize;
        let header = String::from_utf8(r.take(hlen)?.to_vec()).map_err(|_| CheckpointError::Truncated(r.pos))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| CheckpointError::Truncated(r.pos))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Truncated(r.pos));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::numerics::Rng;

    fn model(seed: u64) -> Linear {
        Linear::new(3, 2, true, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn round_trip_restores_parameters() {
        let src = model(1);
        let ck = Checkpoint::from_module("dim = 3\n", &src);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut dst = model(2);
        back.load_into(&mut dst).unwrap();
        assert_eq!(dst.weight.to_vec(), src.weight.to_vec());
        assert!(dst.weight.requires_grad());
        assert_eq!(Checkpoint::from_module("dim = 3\n", &dst).to_bytes(), bytes);
    }

    #[test]
    fn layout_is_little_endian() {
        let ck = Checkpoint {
            header: "h".into(),
            tensors: vec![NamedTensor { name: "w".into(), shape: vec![1], data: vec![1.5] }],
        };
        let b = ck.to_bytes();
        assert_eq!(&b[..8], b"SRDITCKP");
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(b[20], b'h');
        assert_eq!(&b[21..25], &[1, 0, 0, 0]);
        assert_eq!(&b[25..29], &[1, 0, 0, 0]);
        assert_eq!(b[29], b'w');
        assert_eq!(&b[30..34], &[1, 0, 0, 0]);
        assert_eq!(&b[34..42], &1u64.to_le_bytes());
        assert_eq!(&b[42..50], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 50 + 32);
        assert_eq!(&b[50..], Sha256::digest(&b[..50]).as_slice());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::from_module("x", &model(1)).to_bytes();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..30]),
            Err(CheckpointError::Checksum | CheckpointError::Truncated(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::Magic)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let ck = Checkpoint::from_module("", &model(1));
        let mut bigger = Linear::new(4, 2, true, 1.0, &mut Rng::new(0));
        assert!(matches!(ck.load_into(&mut bigger), Err(CheckpointError::Shape { .. })));
        let mut no_bias = Linear::new(3, 2, false, 1.0, &mut Rng::new(0));
        assert!(ck.load_into(&mut no_bias).is_ok());
        let ck2 = Checkpoint::from_module("", &no_bias);
        let mut with_bias = model(0);
        assert!(matches!(ck2.load_into(&mut with_bias), Err(CheckpointError::Missing(n)) if n == "bias"));
    }
}
