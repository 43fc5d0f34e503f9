//! Canonical PPG window representation and the scalar-sequence primitives
//! every downstream transform depends on.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::collections::BTreeMap;

use libm::sqrt;

use crate::error::{Error, Result};

/// Default guard below which a standard deviation is treated as zero.
pub const EPS_STD: f64 = 1e-8;

/// One labeled PPG window.
///
/// The canonical experimental configuration is 1200 samples at 40 Hz, but any
/// positive rate and non-empty length is accepted. Labels map a target name
/// (`sbp`, `dbp`, `hr`, `rr`, `spo2`, ...) to a value in that target's unit;
/// the vocabulary is open.
#[derive(Debug, Clone, PartialEq)]
pub struct PpgRecord {
    pub id: String,
    /// Sampling rate in Hz.
    pub fs: f64,
    /// Dimensionless PPG amplitude samples.
    pub samples: Vec<f64>,
    pub labels: BTreeMap<String, f64>,
}

impl PpgRecord {
    pub fn validate(&self) -> Result<()> {
        if self.fs <= 0.0 || !self.fs.is_finite() {
            return Err(Error::InvalidInput(format!(
                "record {}: fs must be positive and finite, got {}",
                self.id, self.fs
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::InvalidInput(format!("record {}: no samples", self.id)));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "record {}: non-finite sample",
                self.id
            )));
        }
        Ok(())
    }

    pub fn label(&self, target: &str) -> Result<f64> {
        self.labels.get(target).copied().ok_or_else(|| {
            Error::Data(format!("record {} has no label '{target}'", self.id))
        })
    }
}

/// Population mean and standard deviation (1/N).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, sqrt(var))
}

/// Z-score normalization with population std.
///
/// Degenerate inputs (std below `eps_std`) map to all zeros so constant
/// windows flow through the pipeline as blank images rather than erroring.
pub fn zscore(v: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("zscore: empty sequence".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("zscore: non-finite value".into()));
    }
    let (mean, std) = mean_std(v);
    if std < eps_std {
        return Ok(alloc::vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|x| (x - mean) / std).collect())
}

/// First or second discrete difference.
///
/// Order 1: `d1[n] = v[n] - v[n-1]` (length len-1).
/// Order 2: difference of the order-1 sequence (length len-2).
pub fn discrete_diff(v: &[f64], order: usize) -> Result<Vec<f64>> {
    if order != 1 && order != 2 {
        return Err(Error::InvalidConfig(format!("diff order must be 1 or 2, got {order}")));
    }
    if v.len() <= order {
        return Err(Error::InvalidInput(format!(
            "discrete_diff: sequence of length {} too short for order {order}",
            v.len()
        )));
    }
    let d1: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    if order == 1 {
        Ok(d1)
    } else {
        Ok(d1.windows(2).map(|w| w[1] - w[0]).collect())
    }
}

/// Linear-interpolation resampling onto `target_len` uniform positions
/// spanning `[0, len-1]`. Endpoints are preserved exactly. Upsampling is out
/// of scope.
pub fn downsample(v: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if target_len < 2 {
        return Err(Error::InvalidConfig(format!(
            "downsample: target_len must be >= 2, got {target_len}"
        )));
    }
    if target_len > v.len() {
        return Err(Error::InvalidInput(format!(
            "downsample: target_len {} exceeds input length {}",
            target_len,
            v.len()
        )));
    }
    let n = v.len();
    let step = (n - 1) as f64 / (target_len - 1) as f64;
    let mut out = Vec::with_capacity(target_len);
    for k in 0..target_len {
        if k == 0 {
            out.push(v[0]);
        } else if k == target_len - 1 {
            out.push(v[n - 1]);
        } else {
            let pos = k as f64 * step;
            let i = pos as usize;
            let frac = pos - i as f64;
            out.push(v[i] * (1.0 - frac) + v[i + 1] * frac);
        }
    }
    Ok(out)
}
