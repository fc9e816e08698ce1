mod commands;
mod config;
mod exit;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;
use exit::Failure;

/// Build, inspect, verify and train windowed MLP backbones with positional token mixing.
#[derive(Parser)]
#[command(name = "posmlp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print stages, shapes and per-stage parameter counts
    Describe(Overrides),
    /// Print the parameter and FLOP report as JSON
    Cost {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Finite-difference gradient check of the MICRO model in 64-bit
    Gradcheck {
        #[command(flatten)]
        o: Overrides,
        /// Entries sampled per parameter tensor
        #[arg(long, default_value_t = 3)]
        max_entries: usize,
    },
    /// Export token-mixing rows as CSV and PGM heat maps
    Attn {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Query token index within the window
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// Layers such as s0b1; repeat or comma-separate. Default: all
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        /// Group indices; default: all
        #[arg(long, value_delimiter = ',')]
        groups: Vec<usize>,
    },
    /// Export each layer's token bias as CSV and PGM heat maps
    Bias {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-layer non-locality of the Gaussian positional groups
    Nonlocality {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Groups whose smaller precision eigenvalue falls below this are excluded
        #[arg(long, default_value_t = posmlp::analysis::DEFAULT_EXCLUSION_THRESHOLD)]
        threshold: f64,
    },
    /// Train and write metrics.csv plus a checkpoint to the output directory
    Train {
        #[command(flatten)]
        o: Overrides,
        /// Checkpoint path (default: <out>/model.ckpt)
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Loss and top-1 accuracy of a checkpoint
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a freshly initialized model to a checkpoint
    Save {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarize a checkpoint and confirm it re-serializes identically
    Load {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("POSMLP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("POSMLP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(e.to_string()))
}

fn run(cli: Cli) -> commands::Outcome {
    configure_threads()?;
    let resolve = |o: &Overrides| -> Result<config::CliConfig, Failure> {
        let cfg = o.resolve()?;
        commands::echo_config(&cfg)?;
        Ok(cfg)
    };
    match cli.command {
        Command::Describe(o) => commands::describe(&resolve(&o)?),
        Command::Cost { o, batch } => commands::cost(&resolve(&o)?, batch),
        Command::Gradcheck { o, max_entries } => commands::gradcheck(&resolve(&o)?, max_entries),
        Command::Attn {
            o,
            checkpoint,
            query,
            layers,
            groups,
        } => {
            let cfg = resolve(&o)?;
            commands::attn(
                &cfg,
                checkpoint.as_deref(),
                &commands::selection(&layers, &groups)?,
                query,
            )
        }
        Command::Bias { o, checkpoint } => commands::bias(&resolve(&o)?, checkpoint.as_deref()),
        Command::Nonlocality {
            o,
            checkpoint,
            threshold,
        } => commands::nonlocality(&resolve(&o)?, checkpoint.as_deref(), threshold),
        Command::Train { o, save } => commands::train(&resolve(&o)?, save.as_deref()),
        Command::Eval { o, checkpoint } => commands::eval(&resolve(&o)?, &checkpoint),
        Command::Save { o, checkpoint } => commands::save(&resolve(&o)?, &checkpoint),
        Command::Load { o, checkpoint } => {
            resolve(&o)?;
            commands::load(&checkpoint)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
