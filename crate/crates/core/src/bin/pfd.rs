//! `pfd` - train a victim, forge perturbations, train the detector, and
//! benchmark it against unseen gradient attacks.

use clap::{Parser, Subcommand};
use pfd_core::cli as commands;
use pfd_core::config::RunConfig;
use pfd_core::error::Result;

#[derive(Parser)]
#[command(
    name = "pfd",
    about = "Adversarial-example detector trained on forged perturbations",
    version
)]
struct Cli {
    /// key=value config file; flags below override it
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for weights, logs and reports
    #[arg(long, global = true)]
    out: Option<String>,

    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Dataset: mnist or cifar10
    #[arg(long, global = true)]
    dataset: Option<String>,

    /// Attack name: fgsm, bim, pgd, mim, dim, whitebox
    #[arg(long, global = true)]
    attack: Option<String>,

    /// l-infinity budget; accepts fractions like 8/255
    #[arg(long, global = true)]
    epsilon: Option<String>,

    /// Use the detector-aware joint attack
    #[arg(long, global = true)]
    whitebox: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim classifier (fails the run below the accuracy gate)
    TrainVictim,
    /// Generate and persist an adversarial test set
    Attack,
    /// Build the initial-attack noise bank
    BuildBank,
    /// Train the binary detector with perturbation forgery
    TrainDetector,
    /// Benchmark the detector; one report row per attack
    Evaluate,
    /// Run the data-size or initial-attack ablation
    Ablate,
    /// Export bank and forged noise vectors as CSV
    ExportNoise,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out_dir", out)?;
    }
    if let Some(workers) = cli.workers {
        cfg.set("workers", &workers.to_string())?;
    }
    if let Some(dataset) = &cli.dataset {
        cfg.set("dataset", dataset)?;
    }
    if let Some(attack) = &cli.attack {
        cfg.set("attack", attack)?;
    }
    if let Some(eps) = &cli.epsilon {
        cfg.set("epsilon", eps)?;
    }
    if cli.whitebox {
        cfg.set("whitebox", "true")?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::TrainVictim => {
            let out = commands::cmd_train_victim(&cfg)?;
            println!(
                "victim trained: test accuracy {:.4}, weights {}",
                out.test_accuracy,
                out.weights.display()
            );
        }
        Command::Attack => {
            let path = commands::cmd_attack(&cfg)?;
            println!("adversarial set written to {}", path.display());
        }
        Command::BuildBank => {
            let path = commands::cmd_build_bank(&cfg)?;
            println!("noise bank written to {}", path.display());
        }
        Command::TrainDetector => {
            let out = commands::cmd_train_detector(&cfg)?;
            println!(
                "detector trained: final epoch loss {:.4}, weights {}",
                out.final_epoch_loss,
                out.weights.display()
            );
        }
        Command::Evaluate => {
            let path = commands::cmd_evaluate(&cfg)?;
            println!("report written to {}", path.display());
            if let Ok(text) = std::fs::read_to_string(&path) {
                print!("{text}");
            }
        }
        Command::Ablate => {
            let path = commands::cmd_ablate(&cfg)?;
            println!("ablation written to {}", path.display());
        }
        Command::ExportNoise => {
            let path = commands::cmd_export_noise(&cfg)?;
            println!("noise export written to {}", path.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
