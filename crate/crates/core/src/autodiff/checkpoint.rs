//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes   b"DARTSCKP"
//! format_version   u32
//! manifest_len     u64
//! manifest         JSON, UTF-8: {"format_version", "parameters": [{"name", "shape"}], "metadata"}
//! per parameter, in manifest order:
//!     name_len u32, name bytes, rank u32, rank x u64 extents, numel x f64 values
//! ```
//!
//! The manifest duplicates names and shapes so a reader can list the
//! contents without decoding the payload; both copies must agree.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{DartsError, Result};

pub const MAGIC: &[u8; 8] = b"DARTSCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub parameters: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode(store: &ParamStore, metadata: &serde_json::Value) -> Vec<u8> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        parameters: store
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(manifest.len() + 8 * store.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DartsError::format(format!("byte {}", self.pos), "checkpoint truncated")
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(DartsError::format("byte 0", "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(DartsError::Compatibility(format!(
            "checkpoint format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mlen = r.u64()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)
        .map_err(|e| DartsError::format("manifest", e.to_string()))?;
    if manifest.format_version != version {
        return Err(DartsError::format("manifest", "format version disagrees with header"));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.parameters {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| DartsError::format("parameter name", "invalid UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != entry.name || shape != entry.shape {
            return Err(DartsError::format(
                format!("parameter {name}"),
                "record disagrees with manifest",
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(DartsError::format(format!("byte {}", r.pos), "trailing bytes"));
    }
    Ok((store, manifest.metadata))
}

pub fn save(path: &Path, store: &ParamStore, metadata: &serde_json::Value) -> Result<()> {
    fs::write(path, encode(store, metadata)).map_err(|e| DartsError::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| DartsError::io(path, e))?;
    decode(&bytes)
}
