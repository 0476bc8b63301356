// SPDX-License-Identifier: Apache-2.0

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use dcrsim::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid usage");
            eprintln!("dcrsim: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dcrsim: {e:#}");
            ExitCode::FAILURE
        }
    }
}
