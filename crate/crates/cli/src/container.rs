//! Named-array container: the on-disk format for checkpoints and image
//! artifacts.
//!
//! Layout:
//!   bytes 0..8    magic `NARR0001`
//!   bytes 8..16   u64 little-endian: length of the JSON header in bytes
//!   header        JSON: `{ "arrays": [{name, shape, dtype, offset}], "meta": {...} }`
//!                 `offset` counts f64 elements into the payload; `dtype`
//!                 is always `"f64"`; array data is row-major
//!   payload       concatenated IEEE-754 f64, little-endian
//!
//! f64 bit patterns pass through untouched, so save→load round trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 8] = b"NARR0001";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

/// In-memory container: named f64 arrays in a fixed order plus a free-form
/// JSON metadata blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub arrays: Vec<(ArrayEntry, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { arrays: Vec::new(), meta }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: shape/data mismatch");
        let offset = self.arrays.last().map(|(e, _)| e.offset + e.shape.iter().product::<usize>()).unwrap_or(0);
        self.arrays.push((
            ArrayEntry { name: name.to_string(), shape: shape.to_vec(), dtype: "f64".into(), offset },
            data,
        ));
    }

    pub fn get(&self, name: &str) -> Result<(&ArrayEntry, &[f64])> {
        self.arrays
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e, d.as_slice()))
            .with_context(|| format!("container has no array '{name}'"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            arrays: self.arrays.iter().map(|(e, _)| e.clone()).collect(),
            meta: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let total: usize = self.arrays.iter().map(|(_, d)| d.len()).sum();
        let mut buf = Vec::with_capacity(16 + header_bytes.len() + total * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for (_, data) in &self.arrays {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if buf.len() < 16 || &buf[..8] != MAGIC {
            bail!("{}: not a named-array container (bad magic)", path.display());
        }
        let header_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let payload_start = 16 + header_len;
        if buf.len() < payload_start {
            bail!("{}: truncated header", path.display());
        }
        let header: Header = serde_json::from_slice(&buf[16..payload_start])
            .with_context(|| format!("{}: malformed header", path.display()))?;
        let payload = &buf[payload_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            if entry.dtype != "f64" {
                bail!("{}: unsupported dtype '{}' for '{}'", path.display(), entry.dtype, entry.name);
            }
            let len: usize = entry.shape.iter().product();
            let start = entry.offset * 8;
            let end = start + len * 8;
            if end > payload.len() {
                bail!("{}: array '{}' extends past end of file", path.display(), entry.name);
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((entry, data));
        }
        Ok(Container { arrays, meta: header.meta })
    }
}
