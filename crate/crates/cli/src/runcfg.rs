//! Run configuration: a TOML file establishes defaults, command-line flags
//! override individual keys, and one `--seed` governs all randomness.
//!
//! Schema (all keys optional):
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/demo"
//! target = "hr"
//! repr = "stft"              # stft | stft_phase | recurrence
//! profile = "dinov3_like"    # dinov3_like | siglip2_like
//! preset = "tiny"            # tiny | small | full
//! selector = "lora_pool_head"
//! loss = "l1"                # l1 | mse
//! epochs = 10
//! batch_size = 16
//! lr = 1e-4
//! weight_decay = 0.01
//! val_fraction = 0.2
//!
//! [stft]
//! n_window = 128
//! hop = 32
//! n_fft = 128
//! window = "hann"            # hann | rectangular
//! eps = 1e-10
//! one_sided = true
//!
//! [recurrence]
//! sigma = 1.0
//! target_len = 240
//!
//! [lora]
//! rank = 8
//! alpha = 16.0
//! dropout = 0.05
//!
//! [synth]
//! n_records = 100
//! fs = 40.0
//! duration_s = 30.0
//! hr_range = [50.0, 120.0]
//! rr_range = [8.0, 20.0]
//! noise_std = 0.05
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ppgvit_core::imagify::{RecurrenceConfig, ReprTag, StftConfig, WindowKind};
use ppgvit_core::model::Selector;
use ppgvit_core::optim::AdamWConfig;
use ppgvit_core::synth::SynthConfig;
use ppgvit_core::tensorize::{Preset, ProfileName};
use ppgvit_core::train::{LossKind, ReprConfig, TrainConfig};
use ppgvit_core::vit::LoraConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub target: Option<String>,
    pub repr: Option<String>,
    pub profile: Option<String>,
    pub preset: Option<String>,
    pub selector: Option<String>,
    pub loss: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub val_fraction: Option<f64>,
    pub stft: Option<StftToml>,
    pub recurrence: Option<RecurrenceToml>,
    pub lora: Option<LoraToml>,
    pub synth: Option<SynthToml>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftToml {
    pub n_window: Option<usize>,
    pub hop: Option<usize>,
    pub n_fft: Option<usize>,
    pub window: Option<String>,
    pub eps: Option<f64>,
    pub one_sided: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrenceToml {
    pub sigma: Option<f64>,
    pub target_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraToml {
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthToml {
    pub n_records: Option<usize>,
    pub fs: Option<f64>,
    pub duration_s: Option<f64>,
    pub hr_range: Option<[f64; 2]>,
    pub rr_range: Option<[f64; 2]>,
    pub noise_std: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("{}: bad config", p.display()))
            }
        }
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        let d = StftConfig::default();
        let t = self.stft.as_ref();
        Ok(StftConfig {
            n_window: t.and_then(|s| s.n_window).unwrap_or(d.n_window),
            hop: t.and_then(|s| s.hop).unwrap_or(d.hop),
            n_fft: t.and_then(|s| s.n_fft).unwrap_or(d.n_fft),
            window_kind: match t.and_then(|s| s.window.as_deref()) {
                None => d.window_kind,
                Some("hann") => WindowKind::Hann,
                Some("rectangular") => WindowKind::Rectangular,
                Some(other) => bail!("unknown window kind '{other}'"),
            },
            eps: t.and_then(|s| s.eps).unwrap_or(d.eps),
            one_sided: t.and_then(|s| s.one_sided).unwrap_or(d.one_sided),
        })
    }

    pub fn recurrence_config(&self) -> RecurrenceConfig {
        let d = RecurrenceConfig::default();
        let t = self.recurrence.as_ref();
        RecurrenceConfig {
            sigma: t.and_then(|r| r.sigma).unwrap_or(d.sigma),
            target_len: t.and_then(|r| r.target_len).unwrap_or(d.target_len),
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        let d = LoraConfig::default();
        let t = self.lora.as_ref();
        LoraConfig {
            rank: t.and_then(|l| l.rank).unwrap_or(d.rank),
            alpha: t.and_then(|l| l.alpha).unwrap_or(d.alpha),
            dropout: t.and_then(|l| l.dropout).unwrap_or(d.dropout),
        }
    }

    pub fn synth_config(&self, seed_flag: Option<u64>) -> SynthConfig {
        let d = SynthConfig::default();
        let t = self.synth.as_ref();
        SynthConfig {
            n_records: t.and_then(|s| s.n_records).unwrap_or(d.n_records),
            fs: t.and_then(|s| s.fs).unwrap_or(d.fs),
            duration_s: t.and_then(|s| s.duration_s).unwrap_or(d.duration_s),
            hr_range: t.and_then(|s| s.hr_range).map(|[a, b]| (a, b)).unwrap_or(d.hr_range),
            rr_range: t.and_then(|s| s.rr_range).map(|[a, b]| (a, b)).unwrap_or(d.rr_range),
            noise_std: t.and_then(|s| s.noise_std).unwrap_or(d.noise_std),
            seed: seed_flag.or(self.seed).unwrap_or(d.seed),
        }
    }

    pub fn repr_config(&self, repr_flag: Option<&str>) -> Result<ReprConfig> {
        let tag = match repr_flag.or(self.repr.as_deref()) {
            None => ReprTag::Stft,
            Some(s) => ReprTag::parse(s)?,
        };
        Ok(match tag {
            ReprTag::Stft => ReprConfig::Stft(self.stft_config()?),
            ReprTag::StftPhase => ReprConfig::StftPhase(self.stft_config()?),
            ReprTag::Recurrence => ReprConfig::Recurrence(self.recurrence_config()),
        })
    }

    pub fn profile_name(&self, flag: Option<&str>) -> Result<ProfileName> {
        match flag.or(self.profile.as_deref()) {
            None => Ok(ProfileName::Dinov3Like),
            Some(s) => Ok(ProfileName::parse(s)?),
        }
    }

    pub fn preset(&self, flag: Option<&str>) -> Result<Preset> {
        match flag.or(self.preset.as_deref()) {
            None => Ok(Preset::Tiny),
            Some(s) => Ok(Preset::parse(s)?),
        }
    }

    pub fn selector(&self, flag: Option<&str>) -> Result<Selector> {
        match flag.or(self.selector.as_deref()) {
            None => Ok(Selector::LoraPoolHead),
            Some(s) => Ok(Selector::parse(s)?),
        }
    }
}

/// Flag values that override the config file for `train` and `inspect`.
#[derive(Debug, Default, Clone)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub target: Option<String>,
    pub repr: Option<String>,
    pub profile: Option<String>,
    pub preset: Option<String>,
    pub selector: Option<String>,
    pub loss: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub val_fraction: Option<f64>,
}

pub fn build_train_config(file: &FileConfig, ov: &TrainOverrides) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        loss: match ov.loss.as_deref().or(file.loss.as_deref()) {
            None => d.loss,
            Some(s) => LossKind::parse(s)?,
        },
        optim: AdamWConfig {
            lr: ov.lr.or(file.lr).unwrap_or(d.optim.lr),
            weight_decay: ov.weight_decay.or(file.weight_decay).unwrap_or(d.optim.weight_decay),
            ..d.optim
        },
        batch_size: ov.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        epochs: ov.epochs.or(file.epochs).unwrap_or(d.epochs),
        seed: ov.seed.or(file.seed).unwrap_or(d.seed),
        selector: file.selector(ov.selector.as_deref())?,
        repr: file.repr_config(ov.repr.as_deref())?,
        profile: file.profile_name(ov.profile.as_deref())?,
        preset: file.preset(ov.preset.as_deref())?,
        lora: Some(file.lora_config()),
        target: ov.target.clone().or(file.target.clone()).unwrap_or(d.target),
        val_fraction: ov.val_fraction.or(file.val_fraction).unwrap_or(d.val_fraction),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory resolution: flag, then config file, then the
/// `PPGVIT_OUT_DIR` environment variable, then the current directory.
pub fn resolve_out_dir(flag: Option<&Path>, file: &FileConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| file.out_dir.clone())
        .or_else(|| std::env::var_os("PPGVIT_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: FileConfig =
            toml::from_str("epochs = 7\nlr = 0.5\nrepr = \"recurrence\"\n[recurrence]\nsigma = 2.0\n")
                .unwrap();
        let ov = TrainOverrides { epochs: Some(3), ..Default::default() };
        let cfg = build_train_config(&file, &ov).unwrap();
        assert_eq!(cfg.epochs, 3); // flag wins
        assert_eq!(cfg.optim.lr, 0.5); // file wins over default
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
        match cfg.repr {
            ReprConfig::Recurrence(r) => assert_eq!(r.sigma, 2.0),
            other => panic!("wrong repr {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("epcohs = 7\n").is_err());
    }
}
