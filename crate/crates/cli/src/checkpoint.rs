//! Checkpoint files: the named-array container carrying every parameter
//! array in canonical layout order, with a manifest (profile fields, LoRA
//! config, representation, seed, target) in the metadata blob.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ppgvit_core::imagify::{RecurrenceConfig, StftConfig, WindowKind};
use ppgvit_core::model::{build_layout, Model, ModelConfig};
use ppgvit_core::params::ParamStore;
use ppgvit_core::tensorize::{BackboneProfile, ProfileName};
use ppgvit_core::train::{Checkpoint, ReprConfig};
use ppgvit_core::vit::LoraConfig;
use serde::{Deserialize, Serialize};

use crate::container::Container;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileJson {
    name: String,
    patch: usize,
    channel_mean: [f64; 3],
    channel_std: [f64; 3],
    n_registers: usize,
    width: usize,
    depth: usize,
    n_heads: usize,
    head_hidden: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoraJson {
    rank: usize,
    alpha: f64,
    dropout: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "tag")]
enum ReprJson {
    #[serde(rename = "stft")]
    Stft(StftJson),
    #[serde(rename = "stft_phase")]
    StftPhase(StftJson),
    #[serde(rename = "recurrence")]
    Recurrence { sigma: f64, target_len: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StftJson {
    n_window: usize,
    hop: usize,
    n_fft: usize,
    window: String,
    eps: f64,
    one_sided: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    version: u32,
    profile: ProfileJson,
    lora: Option<LoraJson>,
    targets: Vec<String>,
    max_grid: usize,
    seed: u64,
    target: String,
    repr: ReprJson,
}

fn stft_to_json(cfg: &StftConfig) -> StftJson {
    StftJson {
        n_window: cfg.n_window,
        hop: cfg.hop,
        n_fft: cfg.n_fft,
        window: match cfg.window_kind {
            WindowKind::Rectangular => "rectangular".into(),
            WindowKind::Hann => "hann".into(),
        },
        eps: cfg.eps,
        one_sided: cfg.one_sided,
    }
}

fn stft_from_json(j: &StftJson) -> Result<StftConfig> {
    Ok(StftConfig {
        n_window: j.n_window,
        hop: j.hop,
        n_fft: j.n_fft,
        window_kind: match j.window.as_str() {
            "rectangular" => WindowKind::Rectangular,
            "hann" => WindowKind::Hann,
            other => bail!("unknown window kind '{other}'"),
        },
        eps: j.eps,
        one_sided: j.one_sided,
    })
}

fn repr_to_json(repr: &ReprConfig) -> ReprJson {
    match repr {
        ReprConfig::Stft(c) => ReprJson::Stft(stft_to_json(c)),
        ReprConfig::StftPhase(c) => ReprJson::StftPhase(stft_to_json(c)),
        ReprConfig::Recurrence(c) => {
            ReprJson::Recurrence { sigma: c.sigma, target_len: c.target_len }
        }
    }
}

fn repr_from_json(j: &ReprJson) -> Result<ReprConfig> {
    Ok(match j {
        ReprJson::Stft(s) => ReprConfig::Stft(stft_from_json(s)?),
        ReprJson::StftPhase(s) => ReprConfig::StftPhase(stft_from_json(s)?),
        ReprJson::Recurrence { sigma, target_len } => {
            ReprConfig::Recurrence(RecurrenceConfig { sigma: *sigma, target_len: *target_len })
        }
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.model.cfg.profile;
    let manifest = Manifest {
        kind: "checkpoint".into(),
        version: CHECKPOINT_VERSION,
        profile: ProfileJson {
            name: p.name.as_str().into(),
            patch: p.patch,
            channel_mean: p.channel_mean,
            channel_std: p.channel_std,
            n_registers: p.n_registers,
            width: p.width,
            depth: p.depth,
            n_heads: p.n_heads,
            head_hidden: p.head_hidden,
        },
        lora: ckpt.model.cfg.lora.as_ref().map(|l| LoraJson {
            rank: l.rank,
            alpha: l.alpha,
            dropout: l.dropout,
        }),
        targets: ckpt.model.cfg.targets.clone(),
        max_grid: ckpt.model.cfg.max_grid,
        seed: ckpt.seed,
        target: ckpt.target.clone(),
        repr: repr_to_json(&ckpt.repr),
    };
    let mut c = Container::new(serde_json::to_value(&manifest)?);
    for e in ckpt.model.store.layout.entries() {
        c.push(&e.name, &e.shape, ckpt.model.store.get(&e.name).to_vec());
    }
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::load(path)?;
    let m: Manifest = serde_json::from_value(c.meta.clone())
        .with_context(|| format!("{}: bad checkpoint manifest", path.display()))?;
    if m.kind != "checkpoint" {
        bail!("{}: container kind is '{}', expected 'checkpoint'", path.display(), m.kind);
    }
    if m.version != CHECKPOINT_VERSION {
        bail!("{}: unsupported checkpoint version {}", path.display(), m.version);
    }
    let profile = BackboneProfile {
        name: ProfileName::parse(&m.profile.name)?,
        patch: m.profile.patch,
        channel_mean: m.profile.channel_mean,
        channel_std: m.profile.channel_std,
        n_registers: m.profile.n_registers,
        width: m.profile.width,
        depth: m.profile.depth,
        n_heads: m.profile.n_heads,
        head_hidden: m.profile.head_hidden,
    };
    let lora = m.lora.map(|l| LoraConfig { rank: l.rank, alpha: l.alpha, dropout: l.dropout });
    let target_refs: Vec<&str> = m.targets.iter().map(|s| s.as_str()).collect();
    let mut cfg = ModelConfig::new(profile, lora, &target_refs);
    cfg.max_grid = m.max_grid;
    let layout = build_layout(&cfg);
    let mut store = ParamStore::zeros(layout);
    for e in store.layout.entries().to_vec() {
        let (entry, data) = c
            .get(&e.name)
            .with_context(|| format!("{}: missing parameter array", path.display()))?;
        if entry.shape != e.shape {
            bail!(
                "{}: array '{}' has shape {:?}, expected {:?}",
                path.display(),
                e.name,
                entry.shape,
                e.shape
            );
        }
        store.get_mut(&e.name).copy_from_slice(data);
    }
    Ok(Checkpoint {
        model: Model { cfg, store },
        target: m.target,
        repr: repr_from_json(&m.repr)?,
        seed: m.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppgvit_core::model::Model;
    use ppgvit_core::tensorize::Preset;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ModelConfig::new(
            BackboneProfile::preset(ProfileName::Dinov3Like, Preset::Tiny),
            Some(LoraConfig::default()),
            &["hr"],
        );
        Checkpoint {
            model: Model::init(cfg, 42),
            target: "hr".into(),
            repr: ReprConfig::Stft(StftConfig::default()),
            seed: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.target, ckpt.target);
        assert_eq!(back.seed, ckpt.seed);
        assert_eq!(back.repr, ckpt.repr);
        assert_eq!(back.model.cfg, ckpt.model.cfg);
        let bits = |m: &Model| m.store.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&ckpt.model));
    }

    #[test]
    fn rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.narr");
        Container::new(serde_json::json!({"kind": "image"})).save(&path).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
