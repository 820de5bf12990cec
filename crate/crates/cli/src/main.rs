//! `debias`: debiased inference on `x^T beta` with missing outcomes, from
//! data tables or simulated designs.

mod args;
mod commands;
mod error;
mod io;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::RunConfig;
use crate::error::CliError;

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.common.threads {
        if threads == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::input(format!("cannot start {threads} threads: {e}")))?;
    }
    let config = RunConfig::load(cli.common.config.as_deref())?;
    let (seed, out) = (cli.common.seed, cli.common.out.as_deref());
    match &cli.command {
        Command::Fit(args) => commands::fit(args, &config, seed, out),
        Command::Cv(args) => commands::cv(args, &config, seed, out),
        Command::Simulate(args) => commands::simulate(args, &config, seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEBIAS_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
