use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use requant::commands::{self, Outcome};
use requant::config::{ExperimentConfig, ModeName, Overrides};
use requant::Result;

#[derive(Parser)]
#[command(
    name = "requant",
    version,
    about = "Sensitivity analysis and dense-and-sparse quantization of small MLPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    bits: Option<u8>,
    #[arg(long, global = true)]
    group_size: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeName>,
    /// Outlier ratio in percent.
    #[arg(long, global = true)]
    ro: Option<f64>,
    /// Significant-weight ratio in percent.
    #[arg(long, global = true)]
    rs: Option<f64>,
    /// Temperature grid step.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Significant-weight step in percent.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Quadrature intervals.
    #[arg(long, global = true)]
    intervals: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model and write the checkpoint and data splits.
    Train,
    /// Quantize without overlays and write the artifact.
    Quantize,
    /// Layer-wise and interpolation Taylor studies.
    TaylorStudy,
    /// Quadrature error, per-layer aggregates and coverage of the PQI bound.
    Pqi,
    /// Full dense-and-sparse pipeline plus the ablation grid.
    Requant,
    /// Loss, storage and kernel check of an artifact.
    Eval {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        calib: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        out_dir: c.out_dir,
        bits: c.bits,
        group_size: c.group_size,
        mode: c.mode,
        ro: c.ro,
        rs: c.rs,
        alpha: c.alpha,
        beta: c.beta,
        intervals: c.intervals,
    })?;
    let outcome = match cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Quantize => commands::cmd_quantize(&cfg),
        Command::TaylorStudy => commands::cmd_taylor_study(&cfg),
        Command::Pqi => commands::cmd_pqi(&cfg),
        Command::Requant => commands::cmd_requant(&cfg),
        Command::Eval { artifact, calib } => commands::cmd_eval(&cfg, &artifact, &calib),
    }?;
    outcome.into_result()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
