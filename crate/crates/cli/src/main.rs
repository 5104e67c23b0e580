use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = rvae_cli::Cli::parse();
    match rvae_cli::run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
