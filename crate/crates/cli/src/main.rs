use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cosme_core::config::PipelineConfig;
use cosme_core::pipeline::{inspect, Pipeline};

/// Anomaly segmentation experiments on seeded synthetic scenes.
#[derive(Parser)]
#[command(name = "cosme", version)]
struct Cli {
    /// TOML config; defaults apply to every key it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test sets.
    Gen,
    /// Train and freeze the teacher segmentation network.
    Pretrain,
    /// Build the prototype memory and its standardization statistics.
    BuildMemory {
        /// Read teacher features from CSMD dumps in this directory instead.
        #[arg(long)]
        dumps: Option<PathBuf>,
    },
    /// Train the auxiliary student to mimic the teacher.
    TrainAux,
    /// Score the test set and write feature dumps.
    Score {
        /// Memory-only scoring of CSMD dumps in this directory.
        #[arg(long)]
        dumps: Option<PathBuf>,
    },
    /// Compute metrics and group statistics from the score table.
    Eval,
    /// Print a plain-text summary of the evaluation.
    Report,
    /// Run every stage in order.
    RunAll,
    /// Sweep memory and evaluation layer sets.
    Ablate,
    /// Describe an artifact file.
    Inspect { path: PathBuf },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Command::Inspect { path } = &cli.command {
        print!("{}", inspect(path).with_context(|| format!("inspecting {}", path.display()))?);
        return Ok(());
    }
    let pipeline = Pipeline::new(load_config(&cli)?, &cli.out)?;
    match &cli.command {
        Command::Gen => {
            pipeline.echo_config()?;
            pipeline.gen()?;
        }
        Command::Pretrain => {
            let log = pipeline.pretrain()?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!("teacher loss {first:.6} -> {last:.6} over {} epochs", log.len());
            }
        }
        Command::BuildMemory { dumps } => pipeline.build_memory(dumps.as_deref())?,
        Command::TrainAux => {
            let log = pipeline.train_aux()?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!("mimic loss {first:.6} -> {last:.6} over {} epochs", log.len());
            }
        }
        Command::Score { dumps: Some(dir) } => {
            pipeline.score_dumps(dir)?;
        }
        Command::Score { dumps: None } => {
            let t = pipeline.score()?;
            println!("scored {} pixels", t.len());
        }
        Command::Eval => {
            for (name, r) in pipeline.eval()?.channels {
                println!("{name}: auroc {:.4} fpr95 {:.4} ap {:.4}", r.auroc, r.fpr95, r.ap);
            }
        }
        Command::Report => print!("{}", pipeline.report()?),
        Command::RunAll => {
            pipeline.run_all()?;
            print!("{}", std::fs::read_to_string(pipeline.report_path("report.txt"))?);
        }
        Command::Ablate => {
            let rows = pipeline.ablate()?;
            println!("{} ablation settings written to {}", rows.len(), pipeline.report_path("ablation.csv").display());
        }
        Command::Inspect { .. } => unreachable!(),
    }
    Ok(())
}
