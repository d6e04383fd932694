//! Command-line front end: prepare, train, synthesize, evaluate, ablate.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gsynth_core::audio::load_wav;
use gsynth_core::dataset::{load_dataset, Dataset};
use gsynth_core::model::{load_checkpoint, save_checkpoint, Model};
use gsynth_core::motion::bvh::parse_bvh;
use gsynth_core::motion::Skeleton;
use gsynth_core::pipeline::{
    ablate, cmd_prepare, cmd_synthesize, evaluate_item, render_ablation_table, train,
};
use gsynth_core::RunConfig;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "gsynth", about = "Speech-driven gesture synthesis pipeline")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for sampling commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the configured takes and persist the processed dataset.
    Prepare {
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a prepared dataset.
    Train {
        /// Prepared dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for the checkpoint, loss log, and frozen config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a gesture clip for a speech recording.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared dataset directory (normalization stats and skeleton).
        #[arg(long)]
        dataset: PathBuf,
        /// Input speech WAV.
        #[arg(long)]
        wav: PathBuf,
        /// Output frame count at the configured fps.
        #[arg(long, default_value_t = 360)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score synthesized motion against a held-out reference take.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Reference BVH file.
        #[arg(long)]
        bvh: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain per diffusion-step count and tabulate losses and timings.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated diffusion step counts, e.g. 1,100,500.
        #[arg(long = "n-steps", value_delimiter = ',')]
        n_steps: Vec<usize>,
        /// Frames per timed synthesis run.
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(RunConfig::from_toml(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_prepared(dir: &Path) -> Result<(Dataset, Skeleton)> {
    let dataset = load_dataset(dir)?;
    let text = std::fs::read_to_string(dir.join("skeleton.bvh"))
        .with_context(|| format!("reading {}/skeleton.bvh", dir.display()))?;
    let doc = parse_bvh(&text)?;
    Ok((dataset, doc.skeleton))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Model> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let (model, _, _) = load_checkpoint(&mut bytes.as_slice(), Some(cfg.hash()))?;
    Ok(model)
}

fn freeze_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    match cli.command {
        Command::Prepare { out } => {
            if cfg.data.takes.is_empty() {
                bail!("config lists no takes to prepare");
            }
            let prepared = cmd_prepare(&cfg, &out)?;
            println!(
                "prepared {} samples ({} train / {} validation) into {}",
                prepared.dataset.samples.len(),
                prepared.dataset.training_samples().len(),
                prepared.dataset.validation_samples().len(),
                out.display()
            );
        }
        Command::Train { dataset, out } => {
            let (ds, _) = load_prepared(&dataset)?;
            let schedule = cfg.build_schedule()?;
            let outcome = train(&cfg, &ds, &schedule)?;
            freeze_config(&cfg, &out)?;
            let mut bytes = Vec::new();
            save_checkpoint(&mut bytes, &outcome.model, &outcome.opt, cfg.hash())?;
            std::fs::write(out.join("model.ckpt"), bytes)?;
            let log: String = outcome
                .log
                .iter()
                .map(|e| format!("epoch={} train_loss={:.6} val_loss={:.6}\n", e.epoch, e.train_loss, e.val_loss))
                .collect();
            std::fs::write(out.join("loss_log.txt"), log)?;
            println!(
                "trained {} epochs; best validation loss {:.6} at epoch {}; checkpoint at {}",
                outcome.log.len(),
                outcome.best_val_loss,
                outcome.best_epoch,
                out.join("model.ckpt").display()
            );
            if outcome.skipped_steps > 0 {
                eprintln!("warning: skipped {} optimizer steps with non-finite gradients", outcome.skipped_steps);
            }
        }
        Command::Synthesize {
            checkpoint,
            dataset,
            wav,
            frames,
            out,
        } => {
            let (ds, skeleton) = load_prepared(&dataset)?;
            let model = load_model(&checkpoint, &cfg)?;
            let schedule = cfg.build_schedule()?;
            let clip = load_wav(&std::fs::read(&wav)?)?;
            let seed = cli.seed.unwrap_or(cfg.training.seed);
            let (_, bvh_text) = cmd_synthesize(
                &model, &ds.stats, &skeleton, &schedule, &cfg, &clip, frames, seed,
            )?;
            freeze_config(&cfg, &out)?;
            let bvh_path = out.join("output.bvh");
            std::fs::write(&bvh_path, bvh_text)?;
            println!("wrote {frames} frames to {}", bvh_path.display());
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            bvh,
            wav,
            out,
        } => {
            let (ds, skeleton) = load_prepared(&dataset)?;
            let model = load_model(&checkpoint, &cfg)?;
            let schedule = cfg.build_schedule()?;
            let clip = load_wav(&std::fs::read(&wav)?)?;
            let reference = std::fs::read_to_string(&bvh)?;
            let label = bvh
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "item".into());
            let seed = cli.seed.unwrap_or(cfg.training.seed);
            let eval = evaluate_item(
                &model, &ds.stats, &skeleton, &schedule, &cfg, &reference, &clip, &label, seed,
            )?;
            freeze_config(&cfg, &out)?;
            let report_path = out.join(format!("{label}.metrics.txt"));
            std::fs::write(&report_path, eval.render())?;
            println!("wrote {}", report_path.display());
        }
        Command::Ablate {
            dataset,
            n_steps,
            frames,
            out,
        } => {
            if n_steps.is_empty() {
                bail!("--n-steps needs at least one value");
            }
            let (ds, _) = load_prepared(&dataset)?;
            let rows = ablate(&cfg, &ds, &n_steps, frames, 3)?;
            freeze_config(&cfg, &out)?;
            let table = render_ablation_table(&rows);
            std::fs::write(out.join("ablation.tsv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}
