mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tcnet_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "tcnet", version, about = "Triple-context lesion segmentation")]
struct Cli {
    /// Run configuration (JSON); defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.data_dir`.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Overrides `paths.run_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Generate,
    /// Train, keeping the best validation checkpoint and loss/lr CSVs.
    Train,
    /// Per-patient metrics of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probability map and thresholded mask of one volume.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `D x H x W` volume tensor file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train and evaluate the six module combinations.
    Ablate {
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention grids, maps and fusion weights for one slice.
    InspectAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Dimension { .. } => 2,
        Error::Io { .. } | Error::Format(_) | Error::Json(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.data_dir {
        cfg.paths.data_dir = d;
    }
    if let Some(d) = cli.run_dir {
        cfg.paths.run_dir = d;
    }
    match cli.command {
        Command::Generate => commands::generate(&cfg)?,
        Command::Train => commands::train(&cfg)?,
        Command::Eval { checkpoint, out } => commands::eval(&cfg, checkpoint.as_deref(), out.as_deref())?,
        Command::Predict {
            checkpoint,
            input,
            out_dir,
        } => commands::predict(&cfg, checkpoint.as_deref(), &input, &out_dir)?,
        Command::Ablate { epochs, out } => commands::ablation(&cfg, epochs, out.as_deref())?,
        Command::Gradcheck { out } => {
            if !commands::gradcheck(out.as_deref())? {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::from(4));
            }
        }
        Command::InspectAttention {
            checkpoint,
            input,
            slice,
            out_dir,
        } => commands::inspect_attention(&cfg, checkpoint.as_deref(), &input, slice, &out_dir)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            match &e {
                Error::Config(problems) => {
                    eprintln!("error: invalid configuration");
                    for p in problems {
                        eprintln!("  {p}");
                    }
                }
                e => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
