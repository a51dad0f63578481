use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = gcml::cli::Cli::parse();
    match gcml::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
