//! `ccacr` command-line entry point.

mod args;
mod commands;
mod render;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, Format};
use commands::Failure;

fn run(cli: &Cli) -> Result<String, Failure> {
    let seed = cli.seed;
    let report = match &cli.command {
        Command::Estimate(a) => commands::estimate(a, seed),
        Command::Dml(a) => commands::dml(a, seed),
        Command::Decompose(a) => commands::decompose(a, seed),
        Command::KsTest(a) => commands::ks_test(a, seed),
        Command::LimTest(a) => commands::lim(a, seed),
        Command::Simulate(a) => commands::simulate(a, seed),
        Command::Types(a) => commands::types(a, seed),
        Command::Binarize(a) => commands::binarize(a, seed),
    }?;
    Ok(match cli.format {
        Format::Json => render::json(cli.command.name(), &report),
        Format::Text => report.text,
        Format::Csv => render::csv(&report),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let out = match run(&cli) {
        Ok(out) => out,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let written = match &cli.output {
        Some(path) => std::fs::write(path, out.as_bytes()).map_err(|e| format!("{}: {e}", path.display())),
        None => std::io::stdout().lock().write_all(out.as_bytes()).map_err(|e| e.to_string()),
    };
    match written {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: cannot write report: {e}");
            ExitCode::from(1)
        }
    }
}
