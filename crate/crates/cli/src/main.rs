//! `taillab` command-line front end.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs. Exit code 1.
    Validation(String),
    /// Failure while running. Exit code 2.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<taillab::Error> for CliError {
    fn from(e: taillab::Error) -> Self {
        match e {
            taillab::Error::InvalidArgument(_) | taillab::Error::Parse { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "taillab", version, about = "Long-tailed noisy-label learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; beats the config and TAILLAB_OUT_DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides trainer.variant.
    #[arg(long)]
    pub variant: Option<String>,
    /// Worker threads for multi-run commands.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a noisy long-tailed train split and a clean test split.
    GenData(Common),
    /// Train one model and write its run record.
    Train(Common),
    /// Run every configured variant over every configured seed.
    Ablate(Common),
    /// Sweep the rebalancing exponents.
    Sweep(Common),
    /// Render SVG charts from a finished run directory.
    Plot {
        run_dir: PathBuf,
        /// accuracy, per-class, losses or all.
        #[arg(long, default_value = "all")]
        kind: String,
    },
    /// Run the built-in verification checks.
    Selftest {
        /// Negate the balanced-loss gradient to confirm the check catches it.
        #[arg(long, hide = true)]
        flip_balanced_gradient: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train(c) => commands::train(&c),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Sweep(c) => commands::sweep(&c),
        Command::Plot { run_dir, kind } => commands::plot(&run_dir, &kind),
        Command::Selftest { flip_balanced_gradient } => commands::selftest(flip_balanced_gradient),
    };
    match result {
        Ok(summary) => {
            println!("status=ok {summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, kind) = match e {
                CliError::Validation(_) => (1, "validation"),
                CliError::Runtime(_) => (2, "runtime"),
            };
            eprintln!("error: {e}");
            println!("status=error kind={kind}");
            ExitCode::from(code)
        }
    }
}
