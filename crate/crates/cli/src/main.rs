use std::process::ExitCode;

use clap::Parser;
use fgga_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FGGA_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fgga: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
