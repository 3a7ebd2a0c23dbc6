use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use terrafuse_cli::{cmd_evaluate, cmd_finetune, cmd_grid, cmd_pretrain, cmd_report, cmd_synth, ExperimentConfig, Workspace};
use terrafuse_core::encoders::EncoderVariant;
use terrafuse_core::pretrain::Objective;

#[derive(Parser)]
#[command(name = "terrafuse", version, about = "Self-supervised SAR and multispectral fusion experiments")]
struct Cli {
    /// TOML or JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the synth, pretrain and finetune seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Forces reproducible outputs (no wall-clock column).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its band statistics.
    Synth,
    /// Pretrain one encoder with one objective.
    Pretrain {
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        encoder: Option<EncoderVariant>,
    },
    /// Fine-tune an encoder checkpoint for segmentation.
    Finetune {
        /// Encoder checkpoint; defaults to the configured pretrain run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        encoder: Option<EncoderVariant>,
    },
    /// Evaluate a fine-tuned model on the test split.
    Evaluate {
        /// Model checkpoint; defaults to the configured fine-tune run.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        encoder: Option<EncoderVariant>,
    },
    /// Run every objective × encoder cell, skipping completed ones.
    Grid {
        /// Stop after running this many cells.
        #[arg(long)]
        max_cells: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Chart and tabulate per-class IoU from run directories.
    Report {
        /// Run directories or their parents; defaults to the grid under --out.
        dirs: Vec<PathBuf>,
    },
}

fn select(cfg: &mut ExperimentConfig, objective: Option<Objective>, encoder: Option<EncoderVariant>) {
    if let Some(o) = objective {
        cfg.pretrain.objective = o;
    }
    if let Some(e) = encoder {
        cfg.pretrain.encoder = e;
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.deterministic);
    match cli.command {
        Command::Synth => {
            let ws = Workspace::new(cfg, &cli.out)?;
            cmd_synth(&ws)?;
            ws.config.echo(&ws.data_root())?;
            println!("{}", ws.data_root().display());
        }
        Command::Pretrain { objective, encoder } => {
            select(&mut cfg, objective, encoder);
            println!("{}", cmd_pretrain(&Workspace::new(cfg, &cli.out)?)?.display());
        }
        Command::Finetune {
            checkpoint,
            objective,
            encoder,
        } => {
            select(&mut cfg, objective, encoder);
            println!("{}", cmd_finetune(&Workspace::new(cfg, &cli.out)?, checkpoint.as_deref())?.display());
        }
        Command::Evaluate {
            model,
            objective,
            encoder,
        } => {
            select(&mut cfg, objective, encoder);
            println!("{}", cmd_evaluate(&Workspace::new(cfg, &cli.out)?, model.as_deref())?.display());
        }
        Command::Grid { max_cells, workers } => {
            if let Some(w) = workers {
                cfg.grid.workers = w;
            }
            let ws = Workspace::new(cfg, &cli.out)?;
            let summary = cmd_grid(&ws, max_cells)?;
            for c in &summary.skipped {
                println!("skipped {c}");
            }
            for c in &summary.executed {
                println!("ran {c}");
            }
            for c in &summary.pending {
                println!("pending {c}");
            }
        }
        Command::Report { dirs } => {
            let dirs = if dirs.is_empty() {
                vec![cli.out.join("grid")]
            } else {
                dirs
            };
            let (svg, csv) = cmd_report(&dirs, &cli.out)?;
            println!("{}\n{}", svg.display(), csv.display());
        }
    }
    Ok(())
}
