use std::process::ExitCode;

use clap::Parser;
use fedsim::cli::{execute, Cli};
use fedsim::FedsimError;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli).map_err(anyhow::Error::from) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<FedsimError>()
                .map_or(1, FedsimError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
