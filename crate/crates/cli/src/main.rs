use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

/// Parameterization experiments for diffusion and flow models: identity
/// checks, sampler validation, toy training runs and convergence scoring.
#[derive(Parser)]
#[command(name = "denoise-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for the manifest and all outputs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Config or manifest file; command-line flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check conversion, loss and weighting identities on random instances.
    IdentityCheck(commands::IdentityArgs),
    /// Sample from a Gaussian oracle and compare moments with the data.
    Sample(commands::SampleArgs),
    /// Train one arm on the mask task and record its convergence curve.
    Train(commands::TrainArgs),
    /// Train several supervision arms over several seeds and compare them.
    Compare(commands::CompareArgs),
    /// Score a `step,value` curve CSV with AUCC and mAUCC.
    Maucc(commands::MauccArgs),
}

/// Exit codes.
pub const EXIT_IDENTITY: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<denoise_lab::Error> for Failure {
    fn from(e: denoise_lab::Error) -> Self {
        use denoise_lab::Error as E;
        let code = match e {
            E::Divergence { .. } | E::NonFinite { .. } => EXIT_DIVERGENCE,
            _ => EXIT_IO,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::IdentityCheck(a) => commands::identity_check(a),
        Command::Sample(a) => commands::sample(a),
        Command::Train(a) => commands::train(a),
        Command::Compare(a) => commands::compare(a),
        Command::Maucc(a) => commands::maucc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
