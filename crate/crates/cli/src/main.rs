//! `pbrl`: run, check and report penalty-method experiments.
//!
//! Exit status: 0 on success, 1 on runtime failure or a failed check, 2 on an
//! invalid configuration or command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pbrl_core::error::Error;
use pbrl_core::harness::{self, ExperimentKind, Outcome, RunOptions};

#[derive(Parser)]
#[command(name = "pbrl", version, about = "Penalty-method bilevel RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Summarize a finished run directory.
    Report(ReportArgs),
    /// Run every configuration of a sweep and aggregate the results.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Configuration file; the default suite runs when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CommonArgs {
    /// Overrides the configured seed.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Output directory (default: $PBRL_OUT_ROOT/<experiment>-<seed>, else runs/...).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip SVG plots.
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing manifest.toml.
    dir: PathBuf,
    /// Skip SVG plots.
    #[arg(long)]
    no_plots: bool,
}

impl CommonArgs {
    fn options(&self) -> RunOptions {
        RunOptions { seed: self.seed, out: self.out.clone(), plots: !self.no_plots }
    }
}

const DEFAULT_GRADCHECK: &str = "schema_version = 1\nexperiment = \"gradcheck\"\n";

fn dispatch(command: Command) -> Result<Option<Outcome>, Error> {
    match command {
        Command::Run(args) => {
            let cfg = harness::load_config(&args.config)?;
            harness::execute(&cfg, &args.common.options()).map(Some)
        }
        Command::Sweep(args) => {
            let cfg = harness::load_config(&args.config)?;
            if cfg.experiment != ExperimentKind::Sweep {
                return Err(Error::Config {
                    line: None,
                    message: format!("`sweep` needs experiment = \"sweep\", found \"{}\"", cfg.experiment.name()),
                });
            }
            harness::execute(&cfg, &args.common.options()).map(Some)
        }
        Command::Gradcheck(args) => {
            let cfg = match &args.config {
                Some(path) => harness::load_config(path)?,
                None => harness::RunConfig::parse(DEFAULT_GRADCHECK)?,
            };
            harness::execute_gradcheck(&cfg, &args.common.options()).map(Some)
        }
        Command::Report(args) => {
            print!("{}", harness::report(&args.dir, !args.no_plots)?);
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(outcome)) => {
            print!("{}", outcome.summary);
            println!("artifacts: {}", outcome.out_dir.display());
            match outcome.failure {
                None => ExitCode::SUCCESS,
                Some(reason) => {
                    eprintln!("error: {reason}");
                    ExitCode::from(1)
                }
            }
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
