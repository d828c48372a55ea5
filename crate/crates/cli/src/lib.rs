//! Implementations of the `mptp` subcommands.
//!
//! Each command reads a [`RunConfig`], writes its artifacts under
//! `output_dir/<command>/` and returns a summary for the caller to print.

pub mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use mptp_core::checkpoint::CheckpointBundle;
use mptp_core::config::RunConfig;
use mptp_core::data::{load_image, load_manifest, load_samples, save_mask_png, ManifestMode, Sample};
use mptp_core::metrics::{macro_average, BinaryMask, MetricRow};
use mptp_core::text_encoder::Caption;
use mptp_core::train::{
    evaluate_samples, load_segmenter, predict_probabilities, Stage1Trainer, Stage2Init, Stage2Trainer, StepRecord,
};

/// What a training command produced.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub losses: Vec<StepRecord>,
    pub notes: Vec<String>,
}

fn manifest_path(explicit: Option<&Path>, configured: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| configured.cloned())
        .with_context(|| format!("no {what} manifest: pass --manifest or set data.{what}_manifest"))
}

fn load_set(path: &Path, mode: ManifestMode, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let manifest = load_manifest(path, mode)?;
    info!("{}: {} rows", path.display(), manifest.len());
    Ok(load_samples(&manifest, cfg.image_size(), cfg.exec())?)
}

fn write_loss_log(dir: &Path, losses: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
    w.write_record(["step", "loss"])?;
    for r in losses {
        w.write_record([r.step.to_string(), format!("{:.9}", r.loss)])?;
    }
    w.flush()?;
    let pts: Vec<(usize, f64)> = losses.iter().map(|r| (r.step, r.loss)).collect();
    plot::loss_curve(&pts, &dir.join("loss.png"))
}

fn write_summary(dir: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(dir.join("summary.txt"))?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Drives a stepwise trainer to completion with periodic checkpoints.
fn drive(
    dir: &Path,
    every: usize,
    mut step: impl FnMut() -> mptp_core::Result<StepRecord>,
    done: impl Fn() -> bool,
    ckpt: impl Fn() -> mptp_core::Result<CheckpointBundle>,
) -> Result<(Vec<StepRecord>, PathBuf)> {
    let mut losses = Vec::new();
    while !done() {
        let r = step()?;
        info!("step {} epoch {} lr {:.3e} loss {:.6}", r.step, r.epoch, r.lr, r.loss);
        losses.push(r);
        if every > 0 && r.step % every == 0 {
            ckpt()?.save(dir.join(format!("step_{:06}.safetensors", r.step)))?;
        }
    }
    let last = dir.join("final.safetensors");
    ckpt()?.save(&last)?;
    write_loss_log(dir, &losses)?;
    Ok((losses, last))
}

#[derive(Debug, Clone, Default)]
pub struct PretrainArgs {
    pub manifest: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn cmd_pretrain(cfg: &RunConfig, args: &PretrainArgs) -> Result<TrainSummary> {
    let path = manifest_path(args.manifest.as_deref(), cfg.data.train_manifest.as_ref(), "train")?;
    let samples = load_set(&path, ManifestMode::Pretrain, cfg)?;
    let mut t = Stage1Trainer::new(cfg.clone(), samples, cfg.model.embedder.build()?)?;
    let mut notes = Vec::new();
    if let Some(r) = &args.resume {
        let report = t.resume(&CheckpointBundle::load(r)?)?;
        notes.push(format!("resumed from {} at step {}: {report}", r.display(), t.steps_done()));
    }
    let dir = cfg.output_dir.join("pretrain");
    fs::create_dir_all(&dir)?;
    let t = std::cell::RefCell::new(t);
    let (losses, last) = drive(
        &dir,
        cfg.stage1.checkpoint_every,
        || t.borrow_mut().step(),
        || t.borrow().is_done(),
        || t.borrow().checkpoint(),
    )?;
    let t = t.into_inner();
    if let Some(s) = t.last_representation_std()? {
        notes.push(format!("representation std (last batch): {s:.4e}"));
    }
    let head: Vec<_> = losses.iter().take(10).map(|r| r.loss).collect();
    let tail: Vec<_> = losses.iter().rev().take(10).map(|r| r.loss).collect();
    let mut lines = vec![
        "stage: 1 (Siamese pretraining)".to_string(),
        format!("steps: {}", t.steps_done()),
        format!("mean loss first 10: {:.6}", mean(head.into_iter())),
        format!("mean loss last 10: {:.6}", mean(tail.into_iter())),
        format!("checkpoint: {}", last.display()),
    ];
    lines.extend(notes.iter().cloned());
    write_summary(&dir, &lines)?;
    Ok(TrainSummary {
        run_dir: dir,
        final_checkpoint: last,
        losses,
        notes: lines,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub manifest: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub from_scratch: bool,
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainSummary> {
    let init_bundle = match (&args.init_from, args.from_scratch, &args.resume) {
        (Some(_), true, _) => bail!("--init-from and --from-scratch are mutually exclusive"),
        (Some(p), false, _) => Some(CheckpointBundle::load(p).with_context(|| format!("loading {}", p.display()))?),
        (None, true, _) | (None, false, Some(_)) => None,
        (None, false, None) => {
            bail!("stage 2 needs --init-from <stage-1 checkpoint>, --resume <stage-2 checkpoint> or --from-scratch")
        }
    };
    let path = manifest_path(args.manifest.as_deref(), cfg.data.train_manifest.as_ref(), "train")?;
    let samples = load_set(&path, ManifestMode::Segmentation, cfg)?;
    let init = match &init_bundle {
        Some(b) => Stage2Init::Inherit(b),
        None => Stage2Init::FromScratch,
    };
    let mut t = Stage2Trainer::new(cfg.clone(), samples, cfg.model.embedder.build()?, init)?;
    let mut notes = Vec::new();
    if let Some(r) = t.restore_report() {
        notes.push(format!("inherited from stage 1: {r}"));
    }
    if let Some(r) = &args.resume {
        let report = t.resume(&CheckpointBundle::load(r)?)?;
        notes.push(format!("resumed from {} at step {}: {report}", r.display(), t.steps_done()));
    }
    let dir = cfg.output_dir.join("train");
    fs::create_dir_all(&dir)?;
    let t = std::cell::RefCell::new(t);
    let (losses, last) = drive(
        &dir,
        cfg.stage2.checkpoint_every,
        || t.borrow_mut().step(),
        || t.borrow().is_done(),
        || t.borrow().checkpoint(),
    )?;
    let t = t.into_inner();
    let mut lines = vec![
        "stage: 2 (segmentation)".to_string(),
        format!("steps: {}", t.steps_done()),
        format!("final loss: {:.6}", losses.last().map_or(f64::NAN, |r| r.loss)),
        format!("ppe frozen: {}", cfg.freeze_ppe),
        format!("ablation: {:?}", cfg.ablation),
        format!("checkpoint: {}", last.display()),
    ];
    lines.extend(notes);
    write_summary(&dir, &lines)?;
    Ok(TrainSummary {
        run_dir: dir,
        final_checkpoint: last,
        losses,
        notes: lines,
    })
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub csv: PathBuf,
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: Option<&Path>) -> Result<EvalSummary> {
    let bundle = CheckpointBundle::load(checkpoint)?;
    let (model_cfg, store, model) = load_segmenter(&bundle, cfg.model.embedder.build()?)?;
    let run = RunConfig {
        model: model_cfg.model,
        ablation: model_cfg.ablation,
        precision: model_cfg.precision,
        ..cfg.clone()
    };
    let path = manifest_path(manifest, cfg.data.eval_manifest.as_ref(), "eval")?;
    let samples = load_set(&path, ManifestMode::Segmentation, &run)?;
    let rows = evaluate_samples(&model, &samples, &run, store.dtype())?;
    let mean = macro_average(&rows)?;

    let dir = cfg.output_dir.join("eval");
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["image", "dice", "miou", "acc", "precision", "recall"])?;
    let fmt = |r: &MetricRow| r.values().map(|v| format!("{v:.6}"));
    for (s, r) in samples.iter().zip(&rows) {
        let mut rec = vec![s.caption.to_string()];
        rec.extend(fmt(r));
        w.write_record(&rec)?;
    }
    let mut rec = vec!["macro".to_string()];
    rec.extend(fmt(&mean));
    w.write_record(&rec)?;
    w.flush()?;
    write_summary(
        &dir,
        &[
            format!("checkpoint: {}", checkpoint.display()),
            format!("images: {}", rows.len()),
            format!(
                "Dice {:.2}%  mIoU {:.2}%  Acc {:.2}%  Precision {:.2}%  Recall {:.2}%",
                100.0 * mean.dice,
                100.0 * mean.miou,
                100.0 * mean.acc,
                100.0 * mean.precision,
                100.0 * mean.recall
            ),
        ],
    )?;
    Ok(EvalSummary {
        csv: csv_path,
        rows,
        mean,
    })
}

#[derive(Debug, Clone)]
pub struct PredictArgs {
    pub image: PathBuf,
    pub caption: Option<String>,
    pub output: PathBuf,
    /// Also dump raw probabilities as little-endian `f32`.
    pub probabilities: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// At model resolution; the saved PNG is resized to the source image.
    pub mask: BinaryMask,
    pub probabilities: Vec<f32>,
}

pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, args: &PredictArgs) -> Result<Prediction> {
    let caption = match args.caption.as_deref() {
        Some(c) => Caption::new(c)?,
        None => bail!("a caption is required: the model is conditioned on text"),
    };
    let bundle = CheckpointBundle::load(checkpoint)?;
    let (model_cfg, store, model) = load_segmenter(&bundle, cfg.model.embedder.build()?)?;
    let run = RunConfig {
        model: model_cfg.model,
        ablation: model_cfg.ablation,
        precision: model_cfg.precision,
        ..cfg.clone()
    };
    let (h, w) = run.image_size();
    let sample = Sample {
        height: h,
        width: w,
        image: load_image(&args.image, (h, w))?,
        caption,
        mask: None,
    };
    let probs = predict_probabilities(&model, std::slice::from_ref(&sample), 1, store.dtype(), &run)?
        .pop()
        .context("no prediction produced")?;
    let mask = BinaryMask::from_probabilities(h, w, &probs)?;
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // Back to the source resolution so the mask overlays the input.
    let (ow, oh) = image::image_dimensions(&args.image)?;
    let full = if (oh as usize, ow as usize) == (h, w) {
        mask.clone()
    } else {
        let gray = image::GrayImage::from_raw(w as u32, h as u32, mask.data().to_vec()).context("mask buffer")?;
        let up = image::imageops::resize(&gray, ow, oh, image::imageops::FilterType::Nearest);
        BinaryMask::new(oh as usize, ow as usize, up.into_raw())?
    };
    save_mask_png(&full, &args.output)?;
    if let Some(p) = &args.probabilities {
        let bytes: Vec<u8> = probs.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(p, bytes)?;
    }
    Ok(Prediction {
        mask,
        probabilities: probs,
    })
}
