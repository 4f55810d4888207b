//! Precomputed per-residue embedding file:
//! `"BHEM" | version u32 | n_residues u32 | dim u32 | f32[n_residues * dim]`,
//! little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BHEM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub n_residues: usize,
    pub dim: usize,
    /// Row-major `[n_residues, dim]`.
    pub data: Vec<f32>,
}

impl Embedding {
    pub fn new(n_residues: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_residues * dim {
            return Err(Error::Format(format!(
                "embedding payload has {} values, expected {n_residues}x{dim}",
                data.len()
            )));
        }
        Ok(Embedding {
            n_residues,
            dim,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_residues as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(Error::Format("not a BHEM embedding file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported embedding version {version}"
            )));
        }
        let (n, dim) = (word(8) as usize, word(12) as usize);
        let expected = n
            .checked_mul(dim)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format("embedding extents overflow".into()))?;
        let payload = &buf[16..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "embedding payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Embedding::new(n, dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }
}
