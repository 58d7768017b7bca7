use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qrf_cli::{parse_config, run, selftest, CliError, Outcome, RunConfig, Suite};
use qrf_core::models::ModelKind;

#[derive(Parser)]
#[command(name = "qrf", version, about = "Quantum reference frame checks on lattice models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the selected suites and print a markdown summary.
    Check(RunArgs),
    /// Run one model's signature experiment, or the suites named with --suite.
    Model {
        #[arg(id = "kind", value_name = "MODEL", value_parser = parse_model)]
        model: ModelKind,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run the selected suites and write CSV files plus summary.md.
    Report(RunArgs),
    /// Fast battery over every model at small lattices.
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tol: Option<f64>,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// Comma-separated suites.
    #[arg(long, value_enum, value_delimiter = ',')]
    suite: Option<Vec<Suite>>,
    /// Output directory for CSV reports.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated ħ values for the scaling suite.
    #[arg(long, value_delimiter = ',')]
    hbar_ladder: Option<Vec<f64>>,
    /// Absolute tolerance for equality checks.
    #[arg(long)]
    tol: Option<f64>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: qrf_core::models::ModelError| e.to_string())
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => parse_config(path)?,
            None => RunConfig::default(),
        };
        if self.model.is_some() {
            c.model = self.model;
        }
        if self.suite.is_some() {
            c.suites = self.suite;
        }
        if self.out.is_some() {
            c.out = self.out;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(ladder) = self.hbar_ladder {
            c.hbar_ladder = ladder;
        }
        if let Some(tol) = self.tol {
            c.tolerance = tol;
        }
        c.validate()?;
        Ok(c)
    }
}

fn execute(command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Check(args) => {
            let c = args.resolve()?;
            let outcome = run(&c)?;
            if let Some(dir) = &c.out {
                outcome.write(dir)?;
            }
            Ok(outcome)
        }
        Command::Model { model, args } => {
            let mut c = args.resolve()?;
            c.model = Some(model);
            if c.suites.is_none() {
                c.suites = Some(vec![Suite::signature(model)]);
            }
            let outcome = run(&c)?;
            if let Some(dir) = &c.out {
                outcome.write(dir)?;
            }
            Ok(outcome)
        }
        Command::Report(args) => {
            let c = args.resolve()?;
            let outcome = run(&c)?;
            let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("qrf-report"));
            for path in outcome.write(&dir)? {
                eprintln!("wrote {}", path.display());
            }
            Ok(outcome)
        }
        Command::Selftest { seed, tol } => {
            let args = RunArgs { seed, tol, ..RunArgs::default() };
            selftest(&args.resolve()?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(outcome) => {
            print!("{}", outcome.summary_markdown());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
