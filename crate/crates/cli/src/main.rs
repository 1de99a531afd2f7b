//! `mvhash` command-line tool.
//!
//! Exit status: 0 on success, 2 for invalid input or configuration, 3 when
//! training aborts numerically, 1 for anything else (I/O and the like).
//! Failures print one line to stderr:
//! `error: kind=<kind> exit=<code> message=<JSON string>`.

mod args;
mod commands;
mod plot;

use std::process::ExitCode;

use clap::Parser;

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    match e.downcast_ref::<mvhash::Error>() {
        Some(err) if err.is_numerical() => (err.kind(), 3),
        Some(err @ mvhash::Error::Io { .. }) => (err.kind(), 1),
        Some(err) => (err.kind(), 2),
        None if e.downcast_ref::<std::io::Error>().is_some() => ("io", 1),
        None => ("other", 1),
    }
}

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let message = serde_json::to_string(&format!("{e:#}")).unwrap_or_default();
            eprintln!("error: kind={kind} exit={code} message={message}");
            ExitCode::from(code)
        }
    }
}
