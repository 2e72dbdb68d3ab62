use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cpunet::commands;
use cpunet::config::RunConfig;
use cpunet::error::Result;

#[derive(Parser)]
#[command(name = "cpunet", about = "Contour-probabilistic U-Net segmentation toolkit")]
struct Cli {
    /// Configuration file (sectioned key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config entry, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into out_dir.
    Synth,
    /// Train a model on the dataset in data_dir.
    Train {
        /// Warm-start from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Segment one PGM image and write mask + overlay.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Run the finite-difference gradient audit on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for ov in &cli.overrides {
        cfg.apply_override(ov)?;
    }
    cfg.apply_env();
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => {
            let manifest = commands::cmd_synth(&cfg)?;
            println!("wrote {} samples, manifest at {}", cfg.synth.count, manifest.display());
        }
        Command::Train { resume } => {
            let report = commands::cmd_train(&cfg, resume.as_deref())?;
            println!(
                "trained {} steps; best val dice {:.4} (step {}); final train dice {:.4}",
                report.steps, report.best_val_dice, report.best_step, report.final_train_dice
            );
            println!("artifacts in {}", cfg.paths.out_dir.display());
        }
        Command::Eval { checkpoint, data_dir } => {
            let (iou, dice, report) = commands::cmd_eval(&checkpoint, &data_dir)?;
            print!("{report}");
            let report_path = cfg.paths.out_dir.join("eval.txt");
            std::fs::create_dir_all(&cfg.paths.out_dir)
                .and_then(|_| std::fs::write(&report_path, &report))
                .map_err(|e| cpunet::CpError::io(&report_path, e))?;
            println!("mean iou {iou:.4}, mean dice {dice:.4}");
        }
        Command::Predict { checkpoint, image } => {
            let (mask, overlay) = commands::cmd_predict(&checkpoint, &image, &cfg.paths.out_dir)?;
            println!("wrote {} and {}", mask.display(), overlay.display());
        }
        Command::Gradcheck { seed } => {
            let reports = commands::cmd_gradcheck(seed)?;
            for r in &reports {
                println!("{}\t{:.3e}\tpass", r.block, r.max_rel_err);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
