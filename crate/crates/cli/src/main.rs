use std::process::ExitCode;

use clap::Parser;
use cvcs_cli::{execute, init_threads, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = || -> anyhow::Result<_> {
        init_threads()?;
        execute(&cli.command)
    };
    match run() {
        Ok(outcome) => {
            for m in &outcome.messages {
                println!("{m}");
            }
            for w in &outcome.warnings {
                log::warn!("{w}");
            }
            if let Some(p) = &outcome.manifest {
                println!("manifest: {}", p.display());
            }
            if cli.strict && !outcome.warnings.is_empty() {
                eprintln!("error: {} warning(s) under --strict", outcome.warnings.len());
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
