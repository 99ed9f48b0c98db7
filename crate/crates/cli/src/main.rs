use std::process::ExitCode;

use ras_cli::{commands, parse_config, ParseError};

fn main() -> ExitCode {
    let cfg = match parse_config(std::env::args_os()) {
        Ok(cfg) => cfg,
        Err(ParseError::Clap(e)) => e.exit(),
        Err(ParseError::Usage(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match commands::run(&cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
