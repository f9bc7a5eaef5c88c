//! Command-line front end: verification, training runs, evaluation
//! protocols and run aggregation.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;

use args::{Cli, Command};
use error::CliError;

/// Executes a parsed command line. Progress goes to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let seed = cli
        .seed
        .ok_or_else(|| CliError::Config("--seed is required; there is no default seed".into()))?;
    match cli.command {
        Command::Verify { report } => {
            let suite = icrm::verify::Suite { seed, ..Default::default() };
            commands::verify(&suite, report.as_deref(), out)?;
            writeln!(out, "all checks passed")?;
        }
        Command::Train { config, out: dir, lambda, n } => {
            let runs = commands::train(seed, config.as_deref(), &dir, &lambda, n)?;
            for r in runs {
                writeln!(out, "wrote {}", r.display())?;
            }
        }
        Command::Eval { checkpoint, protocol, config, out: dir, n, mix_ratio, reversed } => {
            let flags = commands::EvalFlags { n, mix_ratio, reversed };
            commands::eval(seed, &checkpoint, protocol.into(), config.as_deref(), &dir, &flags)?;
            writeln!(out, "wrote {}", dir.join("metrics.json").display())?;
        }
        Command::Report { runs, out: dir } => {
            let path = commands::report(seed, &runs, &dir)?;
            writeln!(out, "wrote {}", path.display())?;
        }
    }
    Ok(())
}
