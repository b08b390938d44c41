mod args;
mod commands;
mod problem;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use problem::RunConfig;

/// Exit codes: 2 for configuration errors, 3 for an infeasible problem,
/// 1 for I/O trouble and failed comparisons.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mmot::Error),
    #[error("i/o error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use mmot::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::Core(E::Infeasible { .. }) => 3,
            Self::Core(
                E::InvalidParameter(_) | E::Domain { .. } | E::Shape(_) | E::DensityRow { .. } | E::Csv { .. },
            ) => 2,
            Self::Core(_) | Self::Io(..) => 1,
        }
    }
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let threads = match &cli.command {
        Command::Solve(a) | Command::Table(a) | Command::Oracle(a) => a.threads,
        Command::Compare(_) => None,
    };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {t} threads: {e}")))?;
    }
    match &cli.command {
        Command::Solve(a) => commands::solve(&RunConfig::resolve("solve", a)?).map(|_| true),
        Command::Table(a) => commands::table(&RunConfig::resolve("table", a)?).map(|_| true),
        Command::Oracle(a) => commands::oracle(&RunConfig::resolve("oracle", a)?).map(|_| true),
        Command::Compare(a) => commands::compare(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
