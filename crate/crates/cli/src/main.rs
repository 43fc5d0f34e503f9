//! `ppgvit` — turn PPG signals into 2D representations, train a small
//! ViT-style regressor on them, and report MAE.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use ppgvit::{checkpoint, container, dataset, parallel, preview, runcfg};

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ppgvit_core::imagify::ImageTriplet;
use ppgvit_core::report::{render_report, target_display, EvalReport, ReportLayout, ReportRow};
use ppgvit_core::train;
use serde_json::json;

use runcfg::{build_train_config, resolve_out_dir, FileConfig, TrainOverrides};

#[derive(Parser)]
#[command(name = "ppgvit", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled PPG dataset (JSONL)
    Synth(SynthArgs),
    /// Transform records into image containers (plus optional PNG previews)
    Imagify(ImagifyArgs),
    /// Fine-tune a model and write the best-validation checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and report MAE
    Eval(EvalArgs),
    /// Print geometry, token counts, mask statistics, and parameter counts
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset path (JSONL)
    #[arg(long)]
    out: PathBuf,
    /// TOML config file (see README for the schema)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of records
    #[arg(long)]
    n: Option<usize>,
    /// Master seed for all randomness
    #[arg(long)]
    seed: Option<u64>,
    /// Heart-rate range in BPM, as min,max
    #[arg(long, value_parser = parse_range)]
    hr_range: Option<(f64, f64)>,
    /// Respiration-rate range in BRPM, as min,max
    #[arg(long, value_parser = parse_range)]
    rr_range: Option<(f64, f64)>,
    /// Additive Gaussian noise level
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct ImagifyArgs {
    /// Input dataset (JSONL)
    #[arg(long)]
    input: PathBuf,
    /// Output directory (or $PPGVIT_OUT_DIR)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Representation: stft, stft_phase, or recurrence
    #[arg(long)]
    repr: Option<String>,
    /// Also write an 8-bit PNG preview per channel (lossy, not read back)
    #[arg(long)]
    preview: bool,
    /// Parallel workers for per-record transforms
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSONL)
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Label to regress (e.g. hr, rr, sbp, dbp)
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    repr: Option<String>,
    /// Backbone profile: dinov3_like or siglip2_like
    #[arg(long)]
    profile: Option<String>,
    /// Size preset: tiny, small, or full
    #[arg(long)]
    preset: Option<String>,
    /// Trainable set: lora_pool_head, head_only, or full
    #[arg(long)]
    selector: Option<String>,
    /// Training loss: l1 or mse
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Fraction of records held out for validation
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation dataset (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Must match the checkpoint's target when given
    #[arg(long)]
    target: Option<String>,
    /// Report layout: task_rows or bp_slash
    #[arg(long, default_value = "task_rows")]
    layout: String,
    /// Parallel workers for per-record evaluation
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    repr: Option<String>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    selector: Option<String>,
    /// Input image rows (defaults to the representation's output height)
    #[arg(long)]
    rows: Option<usize>,
    /// Input image columns (defaults to the representation's output width)
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    target: Option<String>,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected min,max")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are success, anything else is a usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Imagify(a) => cmd_imagify(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

/// 1 usage/config, 2 data, 3 numeric.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<ppgvit_core::Error>() {
            return match core {
                ppgvit_core::Error::InvalidConfig(_) | ppgvit_core::Error::InvalidInput(_) => 1,
                ppgvit_core::Error::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut cfg = file.synth_config(a.seed);
    if let Some(n) = a.n {
        cfg.n_records = n;
    }
    if let Some(r) = a.hr_range {
        cfg.hr_range = r;
    }
    if let Some(r) = a.rr_range {
        cfg.rr_range = r;
    }
    if let Some(v) = a.noise_std {
        cfg.noise_std = v;
    }
    let records = ppgvit_core::synth::synth_ppg(&cfg)?;
    dataset::save_dataset(&a.out, &records)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn image_container(img: &ImageTriplet, id: &str, fs: f64) -> container::Container {
    let mut c = container::Container::new(json!({
        "kind": "image",
        "id": id,
        "fs": fs,
        "repr_tag": img.repr_tag.as_str(),
        "rows": img.rows,
        "cols": img.cols,
    }));
    for (i, ch) in img.channels.iter().enumerate() {
        c.push(&format!("channel/{i}"), &[img.rows, img.cols], ch.clone());
    }
    c.push(
        "mask",
        &[img.rows, img.cols],
        img.valid_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    );
    c
}

fn cmd_imagify(a: ImagifyArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let repr = file.repr_config(a.repr.as_deref())?;
    let out_dir = resolve_out_dir(a.out_dir.as_deref(), &file);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let records = dataset::load_dataset(&a.input)?;
    let images = parallel::par_map(&records, a.workers, |_, r| {
        r.validate().with_context(|| format!("record '{}'", r.id))?;
        repr.make_image(&r.samples).with_context(|| format!("record '{}'", r.id))
    })?;
    for (r, img) in records.iter().zip(&images) {
        let path = out_dir.join(format!("{}.narr", r.id));
        image_container(img, &r.id, r.fs).save(&path)?;
        if a.preview {
            preview::write_channel_previews(img, &out_dir.join(&r.id))?;
        }
    }
    println!(
        "wrote {} image containers ({}) to {}",
        records.len(),
        repr.tag().as_str(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let ov = TrainOverrides {
        seed: a.seed,
        target: a.target,
        repr: a.repr,
        profile: a.profile,
        preset: a.preset,
        selector: a.selector,
        loss: a.loss,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        val_fraction: a.val_fraction,
    };
    let cfg = build_train_config(&file, &ov)?;
    let out_dir = resolve_out_dir(a.out_dir.as_deref(), &file);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let records = dataset::load_dataset(&a.data)?;
    let t0 = Instant::now();
    let outcome = train::fit(&records, &cfg, &mut || t0.elapsed().as_millis() as u64)?;

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path)?;
    for e in &outcome.log {
        let line = json!({
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "val_mae": e.val_mae,
            "wall_ms": e.wall_ms,
        });
        writeln!(log, "{line}")?;
        println!(
            "epoch {:>3}  train_loss {:.6}  val_mae {:.4}  wall_ms {}",
            e.epoch, e.train_loss, e.val_mae, e.wall_ms
        );
    }
    let ckpt_path = out_dir.join("checkpoint.narr");
    checkpoint::save_checkpoint(&ckpt_path, &outcome.best)?;
    match outcome.best_epoch {
        Some(e) => println!("best epoch {e}; checkpoint -> {}", ckpt_path.display()),
        None => println!("no epochs run; checkpoint is the initialization -> {}", ckpt_path.display()),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file = FileConfig::default();
    let ckpt = checkpoint::load_checkpoint(&a.checkpoint)?;
    if let Some(t) = &a.target {
        if *t != ckpt.target {
            bail!(
                "checkpoint was trained for target '{}' but '--target {t}' was requested",
                ckpt.target
            );
        }
    }
    let records = dataset::load_dataset(&a.data)?;
    if records.is_empty() {
        bail!("{}: empty dataset", a.data.display());
    }
    // per-record predictions, parallel but order-preserving so the MAE
    // reduction below is bit-stable for any worker count
    let preds = parallel::par_map(&records, a.workers, |_, r| {
        let ps = ckpt.model.prepare(&ckpt.repr.make_image(&r.samples)?)?;
        let pred = ckpt.model.predict(&ps, &ckpt.target)?;
        let label = r.label(&ckpt.target)?;
        Ok((r.id.clone(), pred, label))
    })?;
    let mae = preds.iter().map(|(_, p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64;
    let fingerprint = format!(
        "{}/{}:{}/seed={}",
        ckpt.model.cfg.profile.name.as_str(),
        ckpt.repr.tag().as_str(),
        ckpt.target,
        ckpt.seed
    );
    let report = EvalReport {
        target: ckpt.target.clone(),
        mae,
        count: preds.len(),
        unit: target_display(&ckpt.target).1,
        fingerprint: fingerprint.clone(),
    };
    let layout = ReportLayout::parse(&a.layout)?;
    let rows = vec![ReportRow { label: "synthetic".into(), reports: vec![report.clone()] }];
    print!("{}", render_report(&rows, layout)?);

    let out_dir = resolve_out_dir(a.out_dir.as_deref(), &file);
    std::fs::create_dir_all(&out_dir)?;
    let out_path = out_dir.join("eval.jsonl");
    let mut f = std::fs::File::create(&out_path)?;
    writeln!(
        f,
        "{}",
        json!({
            "kind": "report",
            "target": report.target,
            "mae": report.mae,
            "count": report.count,
            "unit": report.unit,
            "fingerprint": report.fingerprint,
        })
    )?;
    for (id, pred, label) in &preds {
        writeln!(f, "{}", json!({"kind": "sample", "id": id, "pred": pred, "label": label}))?;
    }
    println!("machine-readable record -> {}", out_path.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let repr = file.repr_config(a.repr.as_deref())?;
    let profile = ppgvit_core::tensorize::BackboneProfile::preset(
        file.profile_name(a.profile.as_deref())?,
        file.preset(a.preset.as_deref())?,
    );
    let selector = file.selector(a.selector.as_deref())?;
    let target = a.target.or(file.target.clone()).unwrap_or_else(|| "hr".into());

    // default input size: the representation's output for the canonical
    // 1200-sample 40 Hz record
    let (rows, cols) = match (&a.rows, &a.cols) {
        (Some(r), Some(c)) => (*r, *c),
        _ => {
            let probe: Vec<f64> = (0..1200).map(|i| (0.55 * i as f64).sin()).collect();
            let img = repr.make_image(&probe)?;
            (a.rows.unwrap_or(img.rows), a.cols.unwrap_or(img.cols))
        }
    };

    println!("representation: {}", repr.tag().as_str());
    println!("profile: {} (patch {}, registers {}, width {}, depth {}, heads {})",
        profile.name.as_str(), profile.patch, profile.n_registers, profile.width,
        profile.depth, profile.n_heads);
    println!("{}", ppgvit_core::tensorize::describe_geometry(rows, cols, &profile));

    // mask statistics for an all-valid rows x cols input after padding
    let img = ImageTriplet {
        channels: [vec![0.0; rows * cols], vec![0.0; rows * cols], vec![0.0; rows * cols]],
        rows,
        cols,
        valid_mask: vec![true; rows * cols],
        repr_tag: repr.tag(),
    };
    let padded = ppgvit_core::tensorize::pad_and_mask(&img, &profile);
    let ps = ppgvit_core::tensorize::patchify(&padded);
    let valid_pixels = padded.valid_mask.iter().filter(|&&b| b).count();
    let valid_patches = ps.patch_mask.iter().filter(|&&b| b).count();
    println!(
        "mask: {}/{} valid pixels after padding, {}/{} valid patches",
        valid_pixels,
        padded.valid_mask.len(),
        valid_patches,
        ps.patch_mask.len()
    );

    let lora = file.lora_config();
    let per_matrix = 2 * lora.rank * profile.width;
    println!(
        "lora: rank {}, alpha {}, scale {}, params per matrix {}, per layer (q,k,v) {}",
        lora.rank,
        lora.alpha,
        lora.alpha / lora.rank as f64,
        per_matrix,
        3 * per_matrix
    );

    let cfg = ppgvit_core::model::ModelConfig::new(profile, Some(lora), &[target.as_str()]);
    let model = ppgvit_core::model::Model::init(cfg, 0);
    println!(
        "parameters: {} total, {} trainable under selector {}",
        model.n_params(),
        model.n_trainable(selector),
        selector.as_str()
    );
    Ok(())
}
