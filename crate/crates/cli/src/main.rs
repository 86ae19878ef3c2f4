use std::process::ExitCode;

use clap::Parser;
use gradvision_cli::app::{run, Cli};
use gradvision_cli::config::exit_code;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
