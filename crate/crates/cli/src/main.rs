//! Command-line pipeline for data-driven probabilistic finite-gain control:
//! generate excited datasets, learn and certify output-feedback designs,
//! validate them with Monte Carlo campaigns, and render plot-ready results.
//!
//! Exit codes: 0 success, 2 infeasible design or failed re-verification,
//! 3 diverged-rollout fraction above threshold, 4 input or schema error,
//! 1 numerical or internal failure.

mod commands;
mod config;
mod error;
mod textio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Ctx;
use config::ModeCfg;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "probgain",
    version,
    about = "Data-driven output-feedback design with probabilistic finite-gain guarantees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Directory holding all artifacts of this run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an excited open-loop dataset from the configured kernel.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learn the behavior, solve the filter, and certify a controller.
    Design {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the design mode from the config.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Run a Monte Carlo campaign against the certified bound.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the campaign base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the cohort size.
        #[arg(long)]
        cohort: Option<usize>,
        /// Override the rollout horizon T.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Render figure data and a result table from simulation summaries.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the steady-state filter report.
    Are {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-verify a stored design artifact's certificates.
    Check {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    General,
    Constant,
    Zero,
}

impl ModeArg {
    fn to_cfg(self) -> ModeCfg {
        match self {
            ModeArg::General => ModeCfg::General,
            ModeArg::Constant => ModeCfg::Constant,
            ModeArg::Zero => ModeCfg::Zero,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, seed } => {
            let ctx = Ctx::new(&common.config, common.out)?;
            commands::cmd_generate(&ctx, seed)
        }
        Command::Design { common, mode } => {
            let ctx = Ctx::new(&common.config, common.out)?;
            commands::cmd_design(&ctx, mode.map(ModeArg::to_cfg))
        }
        Command::Simulate { common, seed, cohort, horizon } => {
            let ctx = Ctx::new(&common.config, common.out)?;
            commands::cmd_simulate(&ctx, seed, cohort, horizon)
        }
        Command::Report { common } => {
            let ctx = Ctx::new(&common.config, common.out)?;
            commands::cmd_report(&ctx)
        }
        Command::Are { common } => {
            let ctx = Ctx::new(&common.config, common.out)?;
            commands::cmd_are(&ctx)
        }
        Command::Check { common } => {
            let ctx = Ctx::new(&common.config, common.out)?;
            commands::cmd_check(&ctx)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 by default, which this tool reserves for
    // infeasible designs; route argument errors to the input-error code.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 4,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
