//! Whole-model glue: parameter layout, seeded initialization, and the full
//! forward/backward pipeline from a patch set to a scalar prediction.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::imagify::ImageTriplet;
use crate::params::{ParamLayout, ParamStore};
use crate::pool_head::{
    pool_backward, pool_rows, regress, regress_backward, HeadCache, HeadGradRanges, HeadView,
    PoolCache,
};
use crate::rng::Rng;
use crate::tensorize::{normalize_channels, pad_and_mask, patchify, BackboneProfile, PatchSet};
use crate::vit::{
    embed_backward, embed_patches, encoder_backward, encoder_forward, EncoderCache, LoraConfig,
    LoraTarget, Mode, TokenBatch, DEFAULT_MAX_GRID,
};

/// Which parameter groups the optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// LoRA adapters + pooling score vector + regression heads.
    LoraPoolHead,
    /// Regression heads only.
    HeadOnly,
    /// Everything, including the backbone.
    Full,
}

impl Selector {
    pub fn as_str(&self) -> &'static str {
        match self {
            Selector::LoraPoolHead => "lora_pool_head",
            Selector::HeadOnly => "head_only",
            Selector::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lora_pool_head" => Ok(Selector::LoraPoolHead),
            "head_only" => Ok(Selector::HeadOnly),
            "full" => Ok(Selector::Full),
            other => Err(Error::InvalidConfig(format!("unknown selector '{other}'"))),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match self {
            Selector::Full => !name.ends_with("y_mean") && !name.ends_with("y_std"),
            Selector::HeadOnly => {
                name.starts_with("head/") && !name.ends_with("y_mean") && !name.ends_with("y_std")
            }
            Selector::LoraPoolHead => {
                (name.starts_with("lora/") || name.starts_with("pool/") || name.starts_with("head/"))
                    && !name.ends_with("y_mean")
                    && !name.ends_with("y_std")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub profile: BackboneProfile,
    pub lora: Option<LoraConfig>,
    /// Regression heads, one per target name.
    pub targets: Vec<String>,
    /// Side of the factorized positional tables; grids up to this size need
    /// no interpolation.
    pub max_grid: usize,
}

impl ModelConfig {
    pub fn new(profile: BackboneProfile, lora: Option<LoraConfig>, targets: &[&str]) -> Self {
        ModelConfig {
            profile,
            lora,
            targets: targets.iter().map(|t| t.to_string()).collect(),
            max_grid: DEFAULT_MAX_GRID,
        }
    }
}

/// Model = config + flat named parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// Deterministic parameter layout for a config. The entry order here is the
/// checkpoint array order; changing it breaks checkpoint portability.
pub fn build_layout(cfg: &ModelConfig) -> ParamLayout {
    let d = cfg.profile.width;
    let r = cfg.profile.n_registers;
    let pdim = cfg.profile.patch_dim();
    let hidden = 4 * d;
    let mg = cfg.max_grid;
    let mut l = ParamLayout::new();
    l.push("embed/w", &[d, pdim]);
    l.push("embed/b", &[d]);
    l.push("cls", &[d]);
    if r > 0 {
        l.push("reg", &[r, d]);
    }
    l.push("pos/cls", &[d]);
    if r > 0 {
        l.push("pos/reg", &[r, d]);
    }
    l.push("pos/row", &[mg, d]);
    l.push("pos/col", &[mg, d]);
    for layer in 0..cfg.profile.depth {
        let p = format!("enc/{layer}");
        l.push(&format!("{p}/ln1/g"), &[d]);
        l.push(&format!("{p}/ln1/b"), &[d]);
        for t in ["q", "k", "v", "o"] {
            l.push(&format!("{p}/attn/{t}/w"), &[d, d]);
            l.push(&format!("{p}/attn/{t}/b"), &[d]);
        }
        l.push(&format!("{p}/ln2/g"), &[d]);
        l.push(&format!("{p}/ln2/b"), &[d]);
        l.push(&format!("{p}/mlp/w1"), &[hidden, d]);
        l.push(&format!("{p}/mlp/b1"), &[hidden]);
        l.push(&format!("{p}/mlp/w2"), &[d, hidden]);
        l.push(&format!("{p}/mlp/b2"), &[d]);
    }
    if cfg.profile.depth > 0 {
        l.push("enc/final_ln/g", &[d]);
        l.push("enc/final_ln/b", &[d]);
    }
    if let Some(lora) = &cfg.lora {
        for layer in 0..cfg.profile.depth {
            for t in LoraTarget::ALL {
                l.push(&format!("lora/{layer}/{}/a", t.as_str()), &[lora.rank, d]);
                l.push(&format!("lora/{layer}/{}/b", t.as_str()), &[d, lora.rank]);
            }
        }
    }
    l.push("pool/ws", &[d]);
    for target in &cfg.targets {
        let h = cfg.profile.head_hidden;
        l.push(&format!("head/{target}/ln/g"), &[d]);
        l.push(&format!("head/{target}/ln/b"), &[d]);
        l.push(&format!("head/{target}/w1"), &[h, d]);
        l.push(&format!("head/{target}/b1"), &[h]);
        l.push(&format!("head/{target}/w2"), &[h]);
        l.push(&format!("head/{target}/b2"), &[1]);
        // label standardization constants, set once at fit start
        l.push(&format!("head/{target}/y_mean"), &[1]);
        l.push(&format!("head/{target}/y_std"), &[1]);
    }
    l
}

fn init_entry(name: &str, values: &mut [f64], rng: &mut Rng) {
    let small_random = |values: &mut [f64], rng: &mut Rng| {
        for v in values.iter_mut() {
            *v = rng.next_normal() * 0.02;
        }
    };
    if name.ends_with("/g") {
        values.fill(1.0);
    } else if name.ends_with("/b") && !name.contains("lora/") || name.ends_with("b1") || name.ends_with("b2") {
        values.fill(0.0);
    } else if name.contains("lora/") && name.ends_with("/b") {
        values.fill(0.0); // zero-init up-map: fresh adapters are identity deltas
    } else if name.ends_with("y_mean") {
        values.fill(0.0);
    } else if name.ends_with("y_std") {
        values.fill(1.0);
    } else {
        small_random(values, rng);
    }
}

impl Model {
    /// Seeded deterministic initialization. Iteration follows layout order, so
    /// identical (config, seed) pairs produce bit-identical stores.
    pub fn init(cfg: ModelConfig, seed: u64) -> Model {
        let layout = build_layout(&cfg);
        let mut store = ParamStore::zeros(layout);
        let mut rng = Rng::derive(seed, 0x1417);
        let entries: Vec<(String, core::ops::Range<usize>)> = store
            .layout
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.range()))
            .collect();
        for (name, range) in entries {
            init_entry(&name, &mut store.data[range], &mut rng);
        }
        Model { cfg, store }
    }

    pub fn n_params(&self) -> usize {
        self.store.data.len()
    }

    pub fn trainable_mask(&self, selector: Selector) -> Vec<bool> {
        let mut mask = vec![false; self.store.data.len()];
        for e in self.store.layout.entries() {
            if selector.is_trainable(&e.name) {
                mask[e.range()].fill(true);
            }
        }
        mask
    }

    pub fn n_trainable(&self, selector: Selector) -> usize {
        self.trainable_mask(selector).iter().filter(|&&b| b).count()
    }

    /// Image → normalized channels → padded grid → patches.
    pub fn prepare(&self, img: &ImageTriplet) -> Result<PatchSet> {
        img.validate()?;
        let normalized = normalize_channels(img, &self.cfg.profile);
        Ok(patchify(&pad_and_mask(&normalized, &self.cfg.profile)))
    }

    pub fn label_stats(&self, target: &str) -> Result<(f64, f64)> {
        let m = self.store.try_get(&format!("head/{target}/y_mean"))?[0];
        let s = self.store.try_get(&format!("head/{target}/y_std"))?[0];
        Ok((m, s))
    }

    pub fn denormalize(&self, target: &str, y_norm: f64) -> Result<f64> {
        let (m, s) = self.label_stats(target)?;
        Ok(y_norm * s + m)
    }

    pub fn normalize_label(&self, target: &str, y: f64) -> Result<f64> {
        let (m, s) = self.label_stats(target)?;
        Ok((y - m) / s)
    }

    /// Full pipeline forward. Returns the prediction in normalized label
    /// units plus the cache needed by [`Model::backward`].
    pub fn forward(
        &self,
        ps: &PatchSet,
        target: &str,
        mode: Mode,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, PipelineCache)> {
        let tb = embed_patches(ps, &self.store, &self.cfg.profile, self.cfg.max_grid)?;
        let (encoded, enc_cache) = encoder_forward(
            &tb,
            &self.store,
            &self.cfg.profile,
            self.cfg.lora.as_ref(),
            mode,
            dropout_rng,
        )?;
        let d = self.cfg.profile.width;
        let off = encoded.patch_offset();
        let n = encoded.grid_h * encoded.grid_w;
        let feats = encoded.tokens[off * d..(off + n) * d].to_vec();
        let mask: Vec<bool> = encoded.token_mask[off..off + n].to_vec();
        let ws = self.store.try_get("pool/ws")?;
        let (pooled, pool_cache) = pool_rows(&feats, &mask, ws)?;
        let head = HeadView::from_store(&self.store, target)?;
        let (y, head_cache) = regress(&pooled, &head)?;
        Ok((
            y,
            PipelineCache {
                tokens_in: tb,
                encoder: enc_cache,
                pool: pool_cache,
                head: head_cache,
                target: target.to_string(),
            },
        ))
    }

    /// Prediction in the target's real unit (eval mode, no dropout).
    pub fn predict(&self, ps: &PatchSet, target: &str) -> Result<f64> {
        let (y_norm, _) = self.forward(ps, target, Mode::Eval, None)?;
        self.denormalize(target, y_norm)
    }

    /// Full pipeline backward from d(normalized prediction). Accumulates into
    /// `grad`, which must have the store's length.
    pub fn backward(
        &self,
        ps: &PatchSet,
        cache: &PipelineCache,
        dy: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != self.store.data.len() {
            return Err(Error::Shape("gradient buffer length mismatch".into()));
        }
        let head = HeadView::from_store(&self.store, &cache.target)?;
        let ranges = HeadGradRanges::from_store(&self.store, &cache.target)?;
        let dp = regress_backward(dy, &head, &cache.head, &ranges, grad);
        let ws = self.store.try_get("pool/ws")?;
        let ws_range = self.store.layout.range("pool/ws")?;
        let mut dws = vec![0.0; ws.len()];
        let d_feats = pool_backward(&dp, ws, &cache.pool, &mut dws);
        for (g, dv) in grad[ws_range].iter_mut().zip(dws.iter()) {
            *g += dv;
        }
        // scatter feature grads back into token-gradient order
        let d = self.cfg.profile.width;
        let s = cache.tokens_in.n_tokens();
        let off = cache.tokens_in.patch_offset();
        let mut d_tokens = vec![0.0; s * d];
        d_tokens[off * d..].copy_from_slice(&d_feats);
        let d_embed = encoder_backward(
            &cache.tokens_in,
            &cache.encoder,
            &d_tokens,
            &self.store,
            &self.cfg.profile,
            self.cfg.lora.as_ref(),
            grad,
        )?;
        embed_backward(&d_embed, ps, &self.store, &self.cfg.profile, grad)
    }
}

/// Everything cached by one full forward pass.
#[derive(Debug, Clone)]
pub struct PipelineCache {
    pub tokens_in: TokenBatch,
    pub encoder: EncoderCache,
    pub pool: PoolCache,
    pub head: HeadCache,
    pub target: String,
}
