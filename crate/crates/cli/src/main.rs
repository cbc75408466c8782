//! Command-line front end for the segmentation pipeline.
//!
//! Every subcommand works the same way: resolve the configuration
//! (built-in defaults, then the `--config` file, then explicit flags),
//! log the resolution, run, and leave all outputs under the requested
//! directory. Failures print a single machine-parsable JSON line on
//! stderr and map to stable exit codes: 2 for configuration problems,
//! 3 for data and input problems, 4 for checkpoint problems.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sliceseg::Result;

use config::{apply, load_config};

#[derive(Parser)]
#[command(name = "sliceseg", version, about = "2.5D PET/CT lung tumor segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic 4D PET/CT cohort in the raw layout.
    PhantomGen {
        /// Output directory for the raw cohort.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of patients to generate.
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Window, normalize, QC, and split a raw cohort.
    Preprocess {
        /// Raw cohort directory (from phantom-gen or an importer).
        #[arg(long)]
        raw: PathBuf,
        /// Output directory for the processed dataset.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        split_seed: Option<u64>,
        /// Resample exported slices to this side length.
        #[arg(long)]
        png_size: Option<usize>,
    },
    /// Stage 1: train a 2D network on GTV labels.
    Pretrain {
        /// Processed dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoint, logs, and config snapshot.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Stage 2: inflate a 2D checkpoint to 2.5D and fine-tune on IGTV labels.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Compute segmentation metrics for a checkpoint on one split partition.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Partition to evaluate: train, val, or test.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Label to evaluate against: gtv or igtv.
        #[arg(long)]
        target: Option<String>,
    },
    /// Write per-slice mask PNGs and contour overlay figures.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Single patient id; default is every test patient.
        #[arg(long)]
        patient: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        target: Option<String>,
    },
    /// Run the four-row ablation (2D, 2.5D, +finetune, +SIM) end to end.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn announce(config: &Option<PathBuf>, overrides: &[String]) {
    match config {
        Some(p) => println!("config: {} over defaults", p.display()),
        None => println!("config: built-in defaults"),
    }
    for line in overrides {
        println!("config: {line}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen { out, config, patients, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            let mut log = Vec::new();
            apply(&mut cfg.phantom.patients, patients, "phantom.patients", &mut log);
            apply(&mut cfg.seed, seed, "seed", &mut log);
            announce(&config, &log);
            commands::cmd_phantom_gen(&out, &cfg, cfg.phantom.patients, cfg.seed)
        }
        Command::Preprocess { raw, out, config, split_seed, png_size } => {
            let mut cfg = load_config(config.as_deref())?;
            let mut log = Vec::new();
            apply(&mut cfg.preprocess.split_seed, split_seed, "preprocess.split_seed", &mut log);
            if png_size.is_some() {
                apply(&mut cfg.preprocess.png_size, Some(png_size), "preprocess.png_size", &mut log);
            }
            announce(&config, &log);
            commands::cmd_preprocess(&raw, &out, &cfg.preprocess)
        }
        Command::Pretrain { data, out, config, seed, lr, batch_size, max_epochs } => {
            let mut cfg = load_config(config.as_deref())?;
            let mut log = Vec::new();
            apply(&mut cfg.pretrain.lr, lr, "pretrain.lr", &mut log);
            apply(&mut cfg.pretrain.batch_size, batch_size, "pretrain.batch_size", &mut log);
            apply(&mut cfg.pretrain.max_epochs, max_epochs, "pretrain.max_epochs", &mut log);
            apply(&mut cfg.seed, seed, "seed", &mut log);
            announce(&config, &log);
            commands::cmd_pretrain(&data, &out, &cfg, cfg.seed)
        }
        Command::Finetune {
            data,
            checkpoint,
            out,
            config,
            seed,
            lr,
            batch_size,
            max_epochs,
            patience,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let mut log = Vec::new();
            apply(&mut cfg.finetune.lr, lr, "finetune.lr", &mut log);
            apply(&mut cfg.finetune.batch_size, batch_size, "finetune.batch_size", &mut log);
            apply(&mut cfg.finetune.max_epochs, max_epochs, "finetune.max_epochs", &mut log);
            apply(&mut cfg.early_stop.patience, patience, "early_stop.patience", &mut log);
            apply(&mut cfg.seed, seed, "seed", &mut log);
            announce(&config, &log);
            commands::cmd_finetune(&data, &checkpoint, &out, &cfg, cfg.seed)
        }
        Command::Evaluate { data, checkpoint, out, config, split, threshold, target } => {
            let mut cfg = load_config(config.as_deref())?;
            let mut log = Vec::new();
            apply(&mut cfg.evaluate.split, split, "evaluate.split", &mut log);
            apply(&mut cfg.evaluate.threshold, threshold, "evaluate.threshold", &mut log);
            announce(&config, &log);
            commands::cmd_evaluate(&data, &checkpoint, &out, &cfg, target.as_deref())
        }
        Command::Predict { data, checkpoint, out, config, patient, threshold, target } => {
            let mut cfg = load_config(config.as_deref())?;
            let mut log = Vec::new();
            apply(&mut cfg.evaluate.threshold, threshold, "evaluate.threshold", &mut log);
            announce(&config, &log);
            commands::cmd_predict(
                &data,
                &checkpoint,
                &out,
                &cfg,
                patient.as_deref(),
                target.as_deref(),
            )
        }
        Command::Ablation { data, out, config, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            let mut log = Vec::new();
            apply(&mut cfg.seed, seed, "seed", &mut log);
            announce(&config, &log);
            commands::cmd_ablation(&data, &out, &cfg, cfg.seed)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let line = serde_json::json!({
            "category": e.category(),
            "message": e.to_string(),
        });
        eprintln!("{line}");
        std::process::exit(e.exit_code());
    }
}
