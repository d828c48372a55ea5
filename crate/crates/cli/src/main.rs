use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mptp_cli::{cmd_eval, cmd_predict, cmd_pretrain, cmd_train, PredictArgs, PretrainArgs, TrainArgs};
use mptp_core::config::RunConfig;

#[derive(Parser)]
#[command(name = "mptp", version, about = "Text-prompted medical image segmentation: pretrain, train, eval, predict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Run per-sample work on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct Toggles {
    #[arg(long)]
    freeze_ppe: bool,
    #[arg(long)]
    no_downvit: bool,
    #[arg(long)]
    no_upvit: bool,
    #[arg(long)]
    no_msff: bool,
    #[arg(long)]
    no_upattention: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: Siamese image–caption pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        toggles: Toggles,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a stage-1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: segmentation training.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        toggles: Toggles,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Stage-1 checkpoint whose encoder weights are inherited.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Start without a stage-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Continue from a stage-2 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-image and macro metrics of a stage-2 checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Segment one image given its caption.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: Option<String>,
        /// Mask PNG to write (values 0 and 255).
        #[arg(long)]
        output: PathBuf,
        /// Optional raw little-endian f32 probability dump.
        #[arg(long)]
        probabilities: Option<PathBuf>,
    },
}

fn load(common: &Common, toggles: Option<&Toggles>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if common.sequential {
        cfg.parallel = false;
    }
    if let Some(t) = toggles {
        cfg.freeze_ppe |= t.freeze_ppe;
        cfg.ablation.downvit &= !t.no_downvit;
        cfg.ablation.upvit &= !t.no_upvit;
        cfg.ablation.msff &= !t.no_msff;
        cfg.ablation.upattention &= !t.no_upattention;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Pretrain {
            common,
            toggles,
            manifest,
            resume,
        } => {
            let cfg = load(&common, Some(&toggles))?;
            let s = cmd_pretrain(&cfg, &PretrainArgs { manifest, resume })?;
            s.notes.iter().for_each(|l| println!("{l}"));
        }
        Command::Train {
            common,
            toggles,
            manifest,
            init_from,
            from_scratch,
            resume,
        } => {
            let cfg = load(&common, Some(&toggles))?;
            let args = TrainArgs {
                manifest,
                init_from,
                from_scratch,
                resume,
            };
            let s = cmd_train(&cfg, &args)?;
            s.notes.iter().for_each(|l| println!("{l}"));
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
        } => {
            let cfg = load(&common, None)?;
            let s = cmd_eval(&cfg, &checkpoint, manifest.as_deref())?;
            let m = s.mean;
            println!(
                "Dice {:.4}  mIoU {:.4}  Acc {:.4}  Precision {:.4}  Recall {:.4}  ({} images, {})",
                m.dice,
                m.miou,
                m.acc,
                m.precision,
                m.recall,
                s.rows.len(),
                s.csv.display()
            );
        }
        Command::Predict {
            common,
            checkpoint,
            image,
            caption,
            output,
            probabilities,
        } => {
            let cfg = load(&common, None)?;
            let args = PredictArgs {
                image,
                caption,
                output: output.clone(),
                probabilities,
            };
            let p = cmd_predict(&cfg, &checkpoint, &args)?;
            println!("{} foreground pixels; mask written to {}", p.mask.count(), output.display());
        }
    }
    Ok(())
}
