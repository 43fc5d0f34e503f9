//! Flat named-parameter store.
//!
//! All model parameters live in one contiguous `Vec<f64>` addressed through a
//! layout of named, shaped entries. The flat view keeps the optimizer,
//! finite-difference checks, freezing checksums, and checkpoint IO trivial;
//! the names are the checkpoint's array names.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered set of named arrays with fixed offsets into one flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    by_name: BTreeMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize]) {
        debug_assert!(!self.by_name.contains_key(name), "duplicate param {name}");
        let entry = LayoutEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += entry.len();
        self.by_name.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&LayoutEntry> {
        self.by_name
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Shape(format!("no parameter named '{name}'")))
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        Ok(self.entry(name)?.range())
    }
}

/// Layout plus the flat value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(layout: ParamLayout) -> Self {
        let data = alloc::vec![0.0; layout.total_len()];
        ParamStore { layout, data }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        let r = self.layout.range(name).expect("unknown parameter");
        &self.data[r]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.range(name).expect("unknown parameter");
        &mut self.data[r]
    }

    pub fn try_get(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.data[self.layout.range(name)?])
    }

    /// Order-sensitive checksum of the bit patterns of one named array.
    pub fn checksum(&self, name: &str) -> u64 {
        checksum_bits(self.get(name))
    }
}

/// FNV-1a over the IEEE-754 bit patterns; position-sensitive and exact.
pub fn checksum_bits(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
