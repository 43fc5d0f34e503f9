//! Fine-tuning loop (selector-restricted trainables over a frozen backbone),
//! loss, MAE evaluation, and checkpoint content.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::imagify::{
    make_recurrence_image, make_stft_image, make_stft_phase_image, ImageTriplet, RecurrenceConfig,
    ReprTag, StftConfig,
};
use crate::model::{Model, ModelConfig, Selector};
use crate::optim::{AdamW, AdamWConfig};
use crate::report::{target_display, EvalReport};
use crate::rng::Rng;
use crate::signal::{mean_std, PpgRecord};
use crate::synth::split_indices;
use crate::tensorize::{BackboneProfile, PatchSet, Preset, ProfileName};
use crate::vit::{LoraConfig, Mode};

/// Training loss. MAE is the reporting metric, so L1 is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Mse,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::InvalidConfig(format!("unknown loss '{other}'"))),
        }
    }

    /// (loss value, d loss / d prediction).
    pub fn eval(&self, pred: f64, label: f64) -> (f64, f64) {
        let e = pred - label;
        match self {
            LossKind::L1 => (e.abs(), if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 }),
            LossKind::Mse => (e * e, 2.0 * e),
        }
    }
}

/// Which 1D→2D transform a run uses, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ReprConfig {
    Stft(StftConfig),
    StftPhase(StftConfig),
    Recurrence(RecurrenceConfig),
}

impl ReprConfig {
    pub fn tag(&self) -> ReprTag {
        match self {
            ReprConfig::Stft(_) => ReprTag::Stft,
            ReprConfig::StftPhase(_) => ReprTag::StftPhase,
            ReprConfig::Recurrence(_) => ReprTag::Recurrence,
        }
    }

    pub fn default_for(tag: ReprTag) -> Self {
        match tag {
            ReprTag::Stft => ReprConfig::Stft(StftConfig::default()),
            ReprTag::StftPhase => ReprConfig::StftPhase(StftConfig::default()),
            ReprTag::Recurrence => ReprConfig::Recurrence(RecurrenceConfig::default()),
        }
    }

    pub fn make_image(&self, samples: &[f64]) -> Result<ImageTriplet> {
        match self {
            ReprConfig::Stft(cfg) => make_stft_image(samples, cfg),
            ReprConfig::StftPhase(cfg) => make_stft_phase_image(samples, cfg),
            ReprConfig::Recurrence(cfg) => make_recurrence_image(samples, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub selector: Selector,
    pub repr: ReprConfig,
    pub profile: ProfileName,
    pub preset: Preset,
    pub lora: Option<LoraConfig>,
    pub target: String,
    /// Fraction of records held out for validation inside `fit`.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::L1,
            optim: AdamWConfig::default(),
            batch_size: 16,
            epochs: 10,
            seed: 0,
            selector: Selector::LoraPoolHead,
            repr: ReprConfig::default_for(ReprTag::Stft),
            profile: ProfileName::Dinov3Like,
            preset: Preset::Tiny,
            lora: Some(LoraConfig::default()),
            target: String::from("hr"),
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optim.lr <= 0.0 {
            return Err(Error::InvalidConfig("step size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        if self.selector == Selector::LoraPoolHead && self.lora.is_none() {
            return Err(Error::InvalidConfig(
                "selector lora_pool_head requires a LoRA config".into(),
            ));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneProfile {
        BackboneProfile::preset(self.profile, self.preset)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.backbone(), self.lora.clone(), &[self.target.as_str()])
    }

    /// Short identifier embedded in reports.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}/{}/{}:{}/seed={}",
            self.profile.as_str(),
            self.preset.as_str(),
            self.repr.tag().as_str(),
            self.target,
            self.seed
        )
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub target: String,
    pub repr: ReprConfig,
    pub seed: u64,
}

/// One line of the training log. `wall_ms` is the only non-deterministic
/// field; everything else is bit-reproducible for identical (config, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Checkpoint with the best validation MAE (initialization when epochs=0).
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Seeded initialization of a run: model parameters plus label
/// standardization constants computed from the training subset.
pub fn init_checkpoint(records: &[PpgRecord], cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut model = Model::init(cfg.model_config(), cfg.seed);
    let (train_idx, _, _) = fit_split(records.len(), cfg)?;
    let labels: Vec<f64> = train_idx
        .iter()
        .map(|&i| records[i].label(&cfg.target))
        .collect::<Result<_>>()?;
    if labels.is_empty() {
        return Err(Error::Data("no training records".into()));
    }
    let (mean, std) = mean_std(&labels);
    let std = if std < 1e-8 { 1.0 } else { std };
    model.store.get_mut(&format!("head/{}/y_mean", cfg.target))[0] = mean;
    model.store.get_mut(&format!("head/{}/y_std", cfg.target))[0] = std;
    Ok(Checkpoint { model, target: cfg.target.clone(), repr: cfg.repr.clone(), seed: cfg.seed })
}

fn fit_split(n: usize, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    split_indices(n, (1.0 - cfg.val_fraction, cfg.val_fraction, 0.0), cfg.seed)
}

/// Transform every record once; training reuses the patch sets across epochs.
pub fn prepare_patchsets(
    records: &[PpgRecord],
    model: &Model,
    repr: &ReprConfig,
) -> Result<Vec<PatchSet>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            model.prepare(&repr.make_image(&r.samples)?)
        })
        .collect()
}

/// Fine-tune on `records`. The dataset is split into train/validation
/// deterministically from the run seed; only selector-designated parameters
/// change; the best-validation checkpoint is retained.
///
/// `clock` supplies monotonic milliseconds for the log (pass `|| 0` where
/// timing is irrelevant).
pub fn fit(
    records: &[PpgRecord],
    cfg: &TrainConfig,
    clock: &mut dyn FnMut() -> u64,
) -> Result<FitOutcome> {
    for r in records {
        if !r.labels.contains_key(&cfg.target) {
            return Err(Error::Data(format!(
                "record {} has no label '{}'",
                r.id, cfg.target
            )));
        }
    }
    let init = init_checkpoint(records, cfg)?;
    let mut model = init.model.clone();
    let (train_idx, val_idx, _) = fit_split(records.len(), cfg)?;
    let patchsets = prepare_patchsets(records, &model, &cfg.repr)?;
    let labels_norm: Vec<f64> = records
        .iter()
        .map(|r| model.normalize_label(&cfg.target, r.label(&cfg.target)?))
        .collect::<Result<_>>()?;

    let trainable = model.trainable_mask(cfg.selector);
    let mut opt = AdamW::new(cfg.optim.clone(), model.n_params());
    let mut grad = vec![0.0; model.n_params()];
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..cfg.epochs {
        let t0 = clock();
        let mut order = train_idx.clone();
        Rng::derive(cfg.seed, 0xE90C + epoch as u64).shuffle(&mut order);
        let mut dropout_rng = Rng::derive(cfg.seed, 0xD409 + epoch as u64);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.fill(0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (pred, cache) =
                    model.forward(&patchsets[i], &cfg.target, Mode::Train, Some(&mut dropout_rng))?;
                let (loss, dloss) = cfg.loss.eval(pred, labels_norm[i]);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {batch_no}, record {}",
                        records[i].id
                    )));
                }
                loss_sum += loss;
                model.backward(&patchsets[i], &cache, dloss * inv, &mut grad)?;
            }
            opt.step(&mut model.store.data, &grad, &trainable);
        }
        let train_loss = loss_sum / train_idx.len() as f64;

        // validation MAE in real units (falls back to the training subset
        // when val_fraction = 0)
        let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let mut abs_sum = 0.0;
        for &i in eval_idx {
            let pred = model.predict(&patchsets[i], &cfg.target)?;
            abs_sum += (pred - records[i].label(&cfg.target)?).abs();
        }
        let val_mae = abs_sum / eval_idx.len() as f64;
        let wall_ms = clock().saturating_sub(t0);
        log.push(EpochLog { epoch, train_loss, val_mae, wall_ms });
        let improved = best.as_ref().map(|(b, _, _)| val_mae < *b).unwrap_or(true);
        if improved {
            best = Some((val_mae, epoch, model.clone()));
        }
    }

    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, model),
    };
    Ok(FitOutcome {
        best: Checkpoint {
            model: best_model,
            target: cfg.target.clone(),
            repr: cfg.repr.clone(),
            seed: cfg.seed,
        },
        log,
        best_epoch,
    })
}

/// MAE over a dataset in the target's real unit, plus per-sample predictions.
pub fn evaluate(
    records: &[PpgRecord],
    ckpt: &Checkpoint,
    fingerprint: &str,
) -> Result<(EvalReport, Vec<(String, f64, f64)>)> {
    if records.is_empty() {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    let patchsets = prepare_patchsets(records, &ckpt.model, &ckpt.repr)?;
    let mut rows = Vec::with_capacity(records.len());
    let mut abs_sum = 0.0;
    for (r, ps) in records.iter().zip(&patchsets) {
        let label = r.label(&ckpt.target)?;
        let pred = ckpt.model.predict(ps, &ckpt.target)?;
        abs_sum += (pred - label).abs();
        rows.push((r.id.clone(), pred, label));
    }
    let report = EvalReport {
        target: ckpt.target.clone(),
        mae: abs_sum / records.len() as f64,
        count: records.len(),
        unit: target_display(&ckpt.target).1,
        fingerprint: fingerprint.to_string(),
    };
    Ok((report, rows))
}

/// MAE of the predict-the-mean baseline, computed directly from the labels.
pub fn mean_predictor_mae(records: &[PpgRecord], target: &str) -> Result<f64> {
    let labels: Vec<f64> = records.iter().map(|r| r.label(target)).collect::<Result<_>>()?;
    if labels.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    Ok(labels.iter().map(|y| (y - mean).abs()).sum::<f64>() / labels.len() as f64)
}
