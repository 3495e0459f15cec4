use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use vla_align_cli::{Experiment, ExperimentConfig, MissingArtifact};

#[derive(Parser)]
#[command(name = "vla-align", version, about = "Visual representation alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; omitted means all defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seed list overriding the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel runs.
    #[arg(long, global = true, env = "VLA_ALIGN_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate datasets and teacher feature caches.
    GenData,
    /// Train the shared starting checkpoint.
    Pretrain,
    /// Fine-tune the configured mode for every seed.
    Finetune,
    /// Roll out fine-tuned checkpoints on every evaluation set.
    Eval,
    /// Separability, linear-probe and attention-focus diagnostics.
    Probe,
    /// Fine-tune, evaluate and probe every cell of the ablation grid.
    Ablate,
    /// Write attention maps as PGM images and raw tensors.
    AttnExport,
    /// Aggregate evaluations into report tables.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::parse(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = cfg.with_overrides(cli.seeds, cli.out, cli.workers)?;
    let exp = Experiment::new(cfg)?;
    eprintln!("config hash {}", exp.hash);
    match cli.command {
        Command::GenData => exp.gen_data()?,
        Command::Pretrain => exp.run_pretrain()?,
        Command::Finetune => exp.run_finetune()?,
        Command::Eval => exp.run_eval()?,
        Command::Probe => exp.run_probe()?,
        Command::Ablate => {
            let grid = exp.run_ablate()?;
            println!("cells: {}", grid.cells.len());
        }
        Command::AttnExport => {
            let n = exp.run_attn_export()?;
            println!("attention maps: {n}");
        }
        Command::Report => {
            let table = exp.run_report()?;
            print!("{}", table.report_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingArtifact>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
