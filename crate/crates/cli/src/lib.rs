//! Library side of the `cvcs` command-line tool.

pub mod archive;
pub mod commands;
pub mod csvio;
pub mod output;

pub use commands::{execute, Cli, Command, Outcome};

/// Env var capping the worker pool size.
pub const THREADS_ENV: &str = "CZT_THREADS";

/// Sizes the global rayon pool from `CZT_THREADS` when set.
pub fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    anyhow::ensure!(n >= 1, "{THREADS_ENV} must be >= 1");
    // a second call (tests) finds the pool already built
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
