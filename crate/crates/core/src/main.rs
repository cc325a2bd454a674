use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scd_core::config::{parse_scene_spec, TrainConfig};
use scd_core::data::{generate_dataset, load_dataset, save_dataset, SceneSpec};
use scd_core::render::predict_files;
use scd_core::train::{ablate, ablation_json, ablation_markdown, evaluate, load_checkpoint, train};
use scd_core::{Result, ScdError};

#[derive(Parser)]
#[command(name = "scd", version, about = "Bi-temporal semantic change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; checkpoints go to `output_dir` when set.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print metrics JSON for a checkpoint on a dataset directory.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Render predicted maps for one image pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the four module-flag configurations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the table as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut log = |line: &str| eprintln!("{line}");
    match cli.command {
        Command::Train { config } => {
            let cfg = TrainConfig::read(&config)?;
            let out = train(&cfg, &mut log)?;
            println!(
                "{{\"initial_loss\": {:.6}, \"final_loss\": {:.6}, \"best_epoch\": {}, \"best\": {}}}",
                out.initial_loss,
                out.final_loss(),
                out.best_epoch,
                out.history[out.best_epoch - 1].val.to_json()
            );
        }
        Command::Evaluate { ckpt, data, batch } => {
            let (net, store, _) = load_checkpoint(&ckpt)?;
            let samples = load_dataset(&data, net.config.classes)?;
            println!("{}", evaluate(&net, &store, &samples, batch)?.scores.to_json());
        }
        Command::Predict { ckpt, t1, t2, out } => {
            let (net, store, _) = load_checkpoint(&ckpt)?;
            let r = predict_files(&net, &store, &t1, &t2, &out)?;
            log(&format!("wrote {}", r.composite.display()));
        }
        Command::Ablate { config, json } => {
            let cfg = TrainConfig::read(&config)?;
            let rows = ablate(&cfg, &mut log)?;
            print!("{}", ablation_markdown(&rows));
            if let Some(path) = json {
                std::fs::write(path, ablation_json(&rows)?)?;
            }
        }
        Command::Synth { spec, out, count } => {
            if count == 0 {
                return Err(ScdError::InvalidArgument("--count must be positive".into()));
            }
            let spec = match spec {
                Some(p) => parse_scene_spec(&std::fs::read_to_string(&p).map_err(|e| ScdError::Config(format!("{}: {e}", p.display())))?)?,
                None => SceneSpec::default(),
            };
            save_dataset(&out, &generate_dataset(&spec, count)?, spec.classes)?;
            log(&format!("wrote {count} pairs to {}", out.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
