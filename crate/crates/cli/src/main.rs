use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tinytl::blocks::{build_backbone, calibrate_norms, InitStrategy};
use tinytl::gradcheck::{model_gradcheck, seeded_setup};
use tinytl::io::{load_arch, read_json, sweep, sweep_csv, synth_dataset, write_report, write_text, Dataset, SynthSpec};
use tinytl::memory::analyze;
use tinytl::ofa::{adapt_pipeline, AdaptConfig, ElasticSpace, SearchConfig, Supernet};
use tinytl::train::{apply_policy, train, FineTunePolicy, TrainConfig};

#[derive(Parser)]
#[command(name = "tinytl", version, about = "Memory-efficient on-device transfer learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic training memory and MACs of one policy.
    Analyze {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        policy: FineTunePolicy,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a freshly initialized network on a dataset.
    Train {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        policy: FineTunePolicy,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients with finite differences on a seeded model.
    Gradcheck {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        policy: FineTunePolicy,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Supernet fine-tune, predictor-guided evolutionary search, final fine-tune.
    Search {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 100)]
        population: usize,
        #[arg(long, default_value_t = 30)]
        generations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic pattern-classification dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic cost of several policies over several resolutions, as CSV.
    Sweep {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<FineTunePolicy>,
        #[arg(long, value_delimiter = ',', default_value = "128,160,192,224")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Analyze {
            arch,
            policy,
            batch,
            resolution,
            out,
        } => {
            let spec = load_arch(&arch)?;
            let res = resolution.unwrap_or(spec.resolution);
            let (model, mut store) = build_backbone(&spec, &InitStrategy::RandomZeroScale, 0)?;
            apply_policy(&mut store, &policy)?;
            let cost = analyze(&model, &store, batch, res)?;
            eprintln!(
                "{policy} batch {batch} at {res}px: {:.3} MB, {} training MACs",
                cost.memory.totals.headline_mb, cost.training_mac
            );
            let report = json!({
                "arch": arch,
                "policy": policy.to_string(),
                "batch": batch,
                "resolution": res,
                "cost": cost,
            });
            write_report("analyze", &report, &out)?;
        }
        Command::Train {
            arch,
            policy,
            data,
            epochs,
            batch,
            lr,
            seed,
            out,
        } => {
            let spec = load_arch(&arch)?;
            let data_set = load_data(&data)?;
            if data_set.n_classes != spec.head.n_classes {
                bail!(
                    "dataset has {} classes but the architecture's head has {}",
                    data_set.n_classes,
                    spec.head.n_classes
                );
            }
            let (model, mut store) = build_backbone(&spec, &InitStrategy::RandomZeroScale, seed)?;
            let n = data_set.len().min(64);
            let (x, _) = data_set.batch(&(0..n).collect::<Vec<_>>())?;
            calibrate_norms(&model, &mut store, &x)?;
            let report = train(&model, &mut store, &data_set, &policy, &TrainConfig::new(epochs, batch, lr, seed))?;
            eprintln!(
                "{policy}: final loss {:.4}, train accuracy {:.3}, peak saved {} bytes",
                report.loss_curve.last().copied().unwrap_or(f64::NAN),
                report.final_train_acc,
                report.peak_saved_bytes
            );
            let report = json!({ "arch": arch, "data": data, "train": report });
            write_report("train", &report, &out)?;
        }
        Command::Gradcheck { arch, policy, eps, seed } => {
            let spec = load_arch(&arch)?;
            let (model, store, images, labels) = seeded_setup(&spec, seed)?;
            let check = model_gradcheck(&model, &store, &policy, &images, &labels, eps)?;
            println!("{}", serde_json::to_string_pretty(&check)?);
            if !check.selective_equals_save_all {
                eprintln!("selective-save gradients differ from the save-all reference");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Search {
            space,
            data,
            pairs,
            population,
            generations,
            seed,
            out,
        } => {
            let space: ElasticSpace = read_json(&space)?;
            let data_set = load_data(&data)?;
            let mut supernet = Supernet::new(space, &InitStrategy::RandomZeroScale, seed)?;
            let config = AdaptConfig {
                pairs,
                search: SearchConfig {
                    population,
                    generations,
                    seed,
                    ..SearchConfig::default()
                },
                seed,
                ..AdaptConfig::default()
            };
            let (best, _, _, report) = adapt_pipeline(&mut supernet, &data_set, &config, None)?;
            eprintln!(
                "best depths {:?} at {}px, predicted accuracy {:.3}",
                best.depths(),
                best.resolution,
                report.predicted_accuracy
            );
            write_report("search", &report, &out)?;
        }
        Command::Synth {
            classes,
            per_class,
            size,
            seed,
            out,
        } => {
            let d = synth_dataset(&SynthSpec::new(classes, per_class, size, seed))?;
            d.save(&out)?;
            eprintln!("{} samples of {size}×{size} in {classes} classes", d.len());
        }
        Command::Sweep {
            arch,
            policies,
            resolutions,
            batch,
            out,
        } => {
            let spec = load_arch(&arch)?;
            let (model, store) = build_backbone(&spec, &InitStrategy::RandomZeroScale, 0)?;
            let rows = sweep(&model, &store, &policies, &resolutions, batch)?;
            write_text(&sweep_csv(&rows)?, &out)?;
            eprintln!("{} rows", rows.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
