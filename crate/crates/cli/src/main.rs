use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match pat_cli::run(pat_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
