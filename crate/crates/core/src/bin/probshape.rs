use std::process::ExitCode;

use clap::Parser;
use probshape::cli::{error_code, run, Cli};
use probshape::par::with_threads;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = cli.resolve().and_then(|config| {
        with_threads(threads, || {
            run(
                &config,
                &mut std::io::stdout().lock(),
                &mut std::io::stderr().lock(),
            )
        })
        .map_err(anyhow::Error::msg)?
    });
    match result {
        Ok(status) => ExitCode::from(status.code()),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(error_code(&err))
        }
    }
}
