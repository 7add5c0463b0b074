use std::process::ExitCode;

use btrans_cli::args::Cli;
use btrans_cli::{commands, exit_kind};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_kind(&e).code() as u8)
        }
    }
}
