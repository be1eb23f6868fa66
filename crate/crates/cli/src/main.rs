//! `sonic`: dataset generation, training, seed-optimized inpainting and the
//! experiment grid around it.

mod args;
mod cmd;
mod common;
mod snapshot;

use std::process::ExitCode;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::Parser;

use args::Cli;
use common::error_line;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let key = match e.get(ContextKind::InvalidArg) {
                Some(ContextValue::String(s)) => s.clone(),
                _ => "-".to_string(),
            };
            let msg = e.kind().to_string();
            eprintln!(
                "error: kind=usage key={} msg={}",
                key.replace(' ', "_"),
                msg
            );
            return ExitCode::from(2);
        }
    };
    match cmd::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
