//! `kwm` command line: train and evaluate keyword spotting models on Speech
//! Commands style datasets, dump MFCC features, count parameters, and run
//! ablation sweeps.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use kwm_core::checkpoint;
use kwm_core::config::FileConfig;
use kwm_core::data::{build_manifest, LabelTask, Split, SpeechCommandsData};
use kwm_core::features::{load_wav, mfcc, mfcc_to_csv};
use kwm_core::model::count_params;
use kwm_core::train::{ablate, evaluate, train_runs, AblationAxis};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "kwm", about = "Keyword spotting with bidirectional selective state space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an extracted Speech Commands dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (one folder per word plus `_background_noise_`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, metrics and the report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Decode a WAV file and write its MFCC matrix as CSV (40 rows x 98 columns).
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Print the parameter count for a configuration.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an ablation sweep (patch | token-pos | directionality).
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> anyhow::Result<FileConfig> {
    FileConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

/// Builds the data source, reconciling the model's class count with the
/// manifest.
fn open_dataset(
    cfg: &mut FileConfig,
    data_dir: &Path,
    with_augment: bool,
) -> anyhow::Result<SpeechCommandsData> {
    let manifest = build_manifest(data_dir, cfg.task, cfg.train.seed)?;
    let classes = manifest.classes.len();
    if cfg.model.num_classes != classes {
        eprintln!(
            "note: setting num_classes = {classes} from the {} manifest",
            cfg.task.as_str()
        );
        cfg.model.num_classes = classes;
    }
    let augment = (with_augment && cfg.augment_enabled).then(|| cfg.augment.clone());
    Ok(SpeechCommandsData::new(data_dir, manifest, augment, cfg.train.seed)
        .with_cache_dir(data_dir.join("cache")))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train { config, data, out } => {
            let mut cfg = load_config(&config)?;
            let dataset = open_dataset(&mut cfg, &data, true)?;
            std::fs::create_dir_all(&out)?;
            dataset.manifest.save_csv(&out.join("manifest.csv"))?;
            println!(
                "training {} (dim {}, {} layers, {} classes, {} params) on {} train / {} val / {} test examples",
                cfg.model.variant.as_str(),
                cfg.model.dim,
                cfg.model.layers,
                cfg.model.num_classes,
                count_params(&cfg.model),
                dataset.manifest.len_of(Split::Train),
                dataset.manifest.len_of(Split::Val),
                dataset.manifest.len_of(Split::Test),
            );
            let report = train_runs(&cfg.model, &cfg.train, &dataset, Some(&out))?;
            // stamp the dataset task into the best checkpoints so `kwm eval`
            // can rebuild the matching manifest
            for entry in std::fs::read_dir(&out)? {
                let path = entry?.path();
                let ckpt = if path.is_dir() { path.join("best.ckpt") } else { path };
                if ckpt.file_name().is_some_and(|n| n == "best.ckpt") && ckpt.exists() {
                    let (model, _) = checkpoint::load(&ckpt)?;
                    checkpoint::save(
                        &ckpt,
                        &model,
                        &[("task".to_string(), cfg.task.as_str().to_string())],
                    )?;
                }
            }
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "done: test accuracy {:.2}% after {} steps ({:.1}s); report at {}",
                report.test_accuracy,
                report.steps,
                report.wall_secs,
                out.join("report.json").display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            split,
            batch_size,
        } => {
            let split = Split::parse(&split)?;
            let (model, extras) = checkpoint::load(&ckpt)?;
            let task = match extras.get("task") {
                Some(t) => LabelTask::parse(t)?,
                None => bail!("checkpoint does not record its dataset task"),
            };
            let manifest = build_manifest(&data, task, 0)?;
            if manifest.classes.len() != model.cfg.num_classes {
                bail!(
                    "checkpoint expects {} classes but the {} manifest has {}",
                    model.cfg.num_classes,
                    task.as_str(),
                    manifest.classes.len()
                );
            }
            let dataset = SpeechCommandsData::new(&data, manifest, None, 0)
                .with_cache_dir(data.join("cache"));
            let acc = evaluate(&model, &dataset, split, batch_size)?;
            println!("{} accuracy: {acc:.2}%", split.as_str());
        }
        Command::Features { wav, csv } => {
            let w = load_wav(&wav)?;
            let m = mfcc(&w)?;
            std::fs::write(&csv, mfcc_to_csv(&m))?;
            println!(
                "wrote {} ({} source frames, padded to 98)",
                csv.display(),
                m.source_frames
            );
        }
        Command::Params { config } => {
            let cfg = load_config(&config)?;
            let total = count_params(&cfg.model);
            println!(
                "{} dim {} x {} layers ({}, tokens {}): {} parameters ({:.2}M)",
                cfg.model.variant.as_str(),
                cfg.model.dim,
                cfg.model.layers,
                cfg.model.directionality.as_str(),
                cfg.model.class_token_pos.as_str(),
                total,
                total as f64 / 1e6
            );
        }
        Command::Ablate {
            axis,
            config,
            data,
            out,
        } => {
            let axis = AblationAxis::parse(&axis)?;
            let mut cfg = load_config(&config)?;
            let dataset = open_dataset(&mut cfg, &data, true)?;
            std::fs::create_dir_all(&out)?;
            let reports = ablate(axis, &cfg.model, &cfg.train, &dataset, Some(&out))?;
            for r in &reports {
                println!(
                    "{:<18} test acc {:.2}%  ({} params, {:.1}s)",
                    r.label, r.test_accuracy, r.parameter_count, r.wall_secs
                );
            }
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&reports)?)?;
            println!("wrote {}", out.join("ablation.json").display());
        }
    }
    Ok(())
}
