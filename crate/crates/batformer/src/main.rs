use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use batformer::commands::{self, GenerateArgs};
use batformer::config::RunConfig;
use batformer::core::model::ModelConfig;
use batformer::core::synth::Family;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "batformer", version, about = "Boundary-aware transformer segmentation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images, masks, manifest).
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value = "rings")]
        family: String,
        /// Seed of the first sample; sample i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.12)]
        noise: f64,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-sample metrics CSV (printed to stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Segment one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter and FLOP counts.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData {
            out,
            n,
            size,
            classes,
            family,
            seed,
            noise,
        } => {
            let family = Family::parse(&family)?;
            let rows = commands::generate_data(&GenerateArgs {
                out: out.clone(),
                n,
                size,
                classes,
                family,
                seed,
                noise,
            })?;
            println!("wrote {} samples to {}", rows.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let r = commands::train(&cfg, &out, |line| println!("{line}"))?;
            if let Some(e) = r.test {
                println!("test mean dice {:.4}", e.mean_dice());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            batch,
        } => {
            let (e, per_sample, summary) = commands::eval(&checkpoint, &data, batch)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, per_sample).with_context(|| format!("writing {}", p.display()))?;
                    print!("{summary}");
                }
                None => print!("{per_sample}"),
            }
            eprintln!("mean dice {:.4}", e.mean_dice());
        }
        Command::Predict { checkpoint, image, out } => {
            let p = commands::predict(&checkpoint, &image, &out)?;
            println!("wrote {} ({} windows)", out.display(), p.windows.len());
        }
        Command::Analyze { config } => {
            let model = match config {
                Some(p) => RunConfig::load(&p).with_context(|| format!("loading {}", p.display()))?.model,
                None => ModelConfig::default(),
            };
            print!("{}", commands::analyze(&model)?);
        }
        Command::Gradcheck { seed } => {
            let (report, ok) = commands::gradcheck(seed)?;
            print!("{report}");
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
