//! Synthetic PPG generation with known ground-truth labels, plus the seeded
//! dataset split. The waveform is deliberately simple (two cardiac harmonics
//! with respiratory amplitude modulation): the scaffold verifies information
//! flow through the pipeline, not physiological realism.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::sin;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::signal::PpgRecord;

const TAU: f64 = core::f64::consts::TAU;

/// Modulation depth of the respiratory envelope.
const RESP_MODULATION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_records: usize,
    pub fs: f64,
    pub duration_s: f64,
    /// Heart-rate range in BPM, sampled uniformly per record.
    pub hr_range: (f64, f64),
    /// Respiration-rate range in BRPM.
    pub rr_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_records: 100,
            fs: 40.0,
            duration_s: 30.0,
            hr_range: (50.0, 120.0),
            rr_range: (8.0, 20.0),
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 {
            return Err(Error::InvalidConfig("n_records must be > 0".into()));
        }
        if self.fs <= 0.0 || self.duration_s <= 0.0 {
            return Err(Error::InvalidConfig("fs and duration must be positive".into()));
        }
        let n = self.fs * self.duration_s;
        if (n - libm::round(n)).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "duration*fs must be integral, got {n}"
            )));
        }
        for (lo, hi, what) in [
            (self.hr_range.0, self.hr_range.1, "hr_range"),
            (self.rr_range.0, self.rr_range.1, "rr_range"),
        ] {
            if lo <= 0.0 || hi < lo {
                return Err(Error::InvalidConfig(format!("bad {what}: ({lo}, {hi})")));
            }
        }
        // second harmonic of the fastest heart rate must stay below Nyquist
        if self.hr_range.1 / 60.0 * 2.0 >= self.fs / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "hr {} BPM: second harmonic exceeds Nyquist at fs {}",
                self.hr_range.1, self.fs
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generate `n_records` labeled windows. Each record derives its own RNG from
/// (seed, index), so generation order and worker layout do not matter.
pub fn synth_ppg(cfg: &SynthConfig) -> Result<Vec<PpgRecord>> {
    cfg.validate()?;
    let n_samples = libm::round(cfg.fs * cfg.duration_s) as usize;
    let mut out = Vec::with_capacity(cfg.n_records);
    for idx in 0..cfg.n_records {
        let mut rng = Rng::derive(cfg.seed, idx as u64 + 1);
        let hr = rng.uniform(cfg.hr_range.0, cfg.hr_range.1);
        let rr = rng.uniform(cfg.rr_range.0, cfg.rr_range.1);
        let cardiac_phase = rng.uniform(0.0, TAU);
        let resp_phase = rng.uniform(0.0, TAU);
        let f_card = hr / 60.0;
        let f_resp = rr / 60.0;
        let mut samples = Vec::with_capacity(n_samples);
        for n in 0..n_samples {
            let t = n as f64 / cfg.fs;
            let cardiac = sin(TAU * f_card * t + cardiac_phase)
                + 0.5 * sin(2.0 * TAU * f_card * t + 2.0 * cardiac_phase);
            let envelope = 1.0 + RESP_MODULATION * sin(TAU * f_resp * t + resp_phase);
            let noise = if cfg.noise_std > 0.0 { cfg.noise_std * rng.next_normal() } else { 0.0 };
            samples.push(envelope * cardiac + noise);
        }
        let mut labels = BTreeMap::new();
        labels.insert(String::from("hr"), hr);
        labels.insert(String::from("rr"), rr);
        out.push(PpgRecord { id: format!("synth-{idx:05}"), fs: cfg.fs, samples, labels });
    }
    Ok(out)
}

/// Seeded permutation partition into (train, val, test) index sets.
///
/// Val and test sizes are floored; remainder records go to train. Disjoint
/// and exhaustive by construction.
pub fn split_indices(
    n: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (ft, fv, fs_) = fractions;
    if ft < 0.0 || fv < 0.0 || fs_ < 0.0 || (ft + fv + fs_ - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fs_})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, 0x5911).shuffle(&mut order);
    let n_val = (fv * n as f64) as usize;
    let n_test = (fs_ * n as f64) as usize;
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Clone-based convenience wrapper over [`split_indices`].
pub fn split(
    records: &[PpgRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<PpgRecord>, Vec<PpgRecord>, Vec<PpgRecord>)> {
    let (t, v, s) = split_indices(records.len(), fractions, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&t), pick(&v), pick(&s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { n_records: 100, seed: 9, ..Default::default() };
        let a = synth_ppg(&cfg).unwrap();
        let b = synth_ppg(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(a[0].samples.len(), 1200);
    }

    #[test]
    fn labels_recorded_exactly_and_in_range() {
        let cfg = SynthConfig { n_records: 20, ..Default::default() };
        for r in synth_ppg(&cfg).unwrap() {
            let hr = r.labels["hr"];
            let rr = r.labels["rr"];
            assert!((50.0..=120.0).contains(&hr));
            assert!((8.0..=20.0).contains(&rr));
            r.validate().unwrap();
        }
    }

    #[test]
    fn nyquist_guard() {
        let cfg = SynthConfig { hr_range: (50.0, 650.0), ..Default::default() };
        assert!(synth_ppg(&cfg).is_err());
    }

    #[test]
    fn split_rule_floor_remainder_to_train() {
        let (t, v, s) = split_indices(10, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((t.len(), v.len(), s.len()), (8, 1, 1));
        // disjoint + exhaustive
        let mut all: Vec<usize> = t.iter().chain(&v).chain(&s).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_deterministic_per_seed() {
        assert_eq!(
            split_indices(100, (0.7, 0.2, 0.1), 5).unwrap(),
            split_indices(100, (0.7, 0.2, 0.1), 5).unwrap()
        );
        assert_ne!(
            split_indices(100, (0.7, 0.2, 0.1), 5).unwrap().0,
            split_indices(100, (0.7, 0.2, 0.1), 6).unwrap().0
        );
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split_indices(10, (0.5, 0.2, 0.2), 1).is_err());
    }
}
