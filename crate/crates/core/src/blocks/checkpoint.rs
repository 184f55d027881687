//! `PVD1` parameter container plus its JSON sidecar.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! b"PVD1" | u32 tensor count | per tensor: u32 rank, rank × u32 dims, f64 values
//! ```
//!
//! The sidecar (`<path>.json`) names each tensor's role and kind, and carries
//! free-form metadata such as the model configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlockError, ParamKind, Parameterized, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PVD1";

pub fn encode_pvd(tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| BlockError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_pvd(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(BlockError::Format("bad magic, expected PVD1".into()));
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(&shape, data).map_err(|e| BlockError::Format(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(BlockError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub index: usize,
    pub role: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A loaded checkpoint: tensors with their roles, plus sidecar metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<TensorEntry>,
    pub tensors: Vec<Tensor>,
    pub meta: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(
    module: &dyn Parameterized,
    path: &Path,
    meta: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    module.visit("", &mut |role, kind, t| {
        entries.push(TensorEntry {
            index: entries.len(),
            role: role.to_string(),
            kind,
            shape: t.shape().to_vec(),
        });
        tensors.push(t.clone());
    });
    let refs: Vec<&Tensor> = tensors.iter().collect();
    std::fs::write(path, encode_pvd(&refs))?;
    let sidecar = Sidecar {
        format: "PVD1".into(),
        tensors: entries,
        meta,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let tensors = decode_pvd(&std::fs::read(path)?)?;
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.tensors.len() != tensors.len() {
        return Err(BlockError::Format(format!(
            "sidecar lists {} tensors, container has {}",
            sidecar.tensors.len(),
            tensors.len()
        )));
    }
    for (e, t) in sidecar.tensors.iter().zip(&tensors) {
        if e.shape != t.shape() {
            return Err(BlockError::Format(format!(
                "{}: sidecar shape {:?} vs stored {:?}",
                e.role,
                e.shape,
                t.shape()
            )));
        }
    }
    Ok(Checkpoint {
        entries: sidecar.tensors,
        tensors,
        meta: sidecar.meta,
    })
}

impl Checkpoint {
    /// Copies stored tensors into `module`, which must have exactly the same
    /// roles and shapes in the same order.
    pub fn apply_to(&self, module: &mut dyn Parameterized) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        module.visit_mut("", &mut |role, _, t| {
            if err.is_some() {
                return;
            }
            match (self.entries.get(i), self.tensors.get(i)) {
                (Some(e), Some(src)) if e.role == role && src.shape() == t.shape() => {
                    *t = src.clone();
                }
                (Some(e), _) => {
                    err = Some(format!("tensor {i}: stored {} does not fit {role}", e.role))
                }
                (None, _) => err = Some(format!("checkpoint has no tensor for {role}")),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(BlockError::Format(e));
        }
        if i != self.tensors.len() {
            return Err(BlockError::Format(format!(
                "checkpoint holds {} tensors, model uses {i}",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_pvd(&[&t]);
        assert_eq!(&bytes[..4], b"PVD1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 32);
        assert_eq!(decode_pvd(&bytes).unwrap(), vec![t]);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::ones(&[3, 2]);
        let bytes = encode_pvd(&[&t]);
        assert!(decode_pvd(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_pvd(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_pvd(&long).is_err());
    }
}
