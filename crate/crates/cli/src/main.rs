//! `cgbp`: run chain BP, spin-glass tree BP and coarse-grained BP from TOML
//! configs and write CSV/JSON tables.

mod commands;
mod config;
mod output;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<cgbp_core::Error> for CliError {
    fn from(e: cgbp_core::Error) -> Self {
        use cgbp_core::Error as E;
        match e {
            E::Numerical(_) | E::Singular(_) | E::Normalization(_) => CliError::Numerical(e.to_string()),
            E::Serialization(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "cgbp", version, about = "Quantum belief propagation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Infinite TFIM chain over a temperature grid, compared with the exact solution.
    ChainBp(Common),
    /// Edwards-Anderson parameter on a Cayley tree with random boundary fields.
    SpinGlass(Common),
    /// Coarse-grained BP: MERA levels, switching temperatures and the stitched curve.
    Cgbp(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides the `seed` key of the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    #[arg(long)]
    verbose: bool,
}

type Runner = fn(&str, &commands::Options) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    let (run_cmd, common): (Runner, Common) = match cli.command {
        Command::ChainBp(c) => (commands::chain_bp, c),
        Command::SpinGlass(c) => (commands::spin_glass, c),
        Command::Cgbp(c) => (commands::cgbp, c),
    };
    let text = fs::read_to_string(&common.config)
        .map_err(|e| CliError::Io(format!("{}: {e}", common.config.display())))?;
    if common.workers == Some(0) {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Io(format!("worker pool: {e}")))?;
    let opts = commands::Options { out: common.out, seed: common.seed, verbose: common.verbose };
    pool.install(|| run_cmd(&text, &opts))
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cgbp: {e}");
            ExitCode::from(e.code())
        }
    }
}
