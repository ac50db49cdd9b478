use std::process::ExitCode;

use clap::Parser;
use elastikit::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::init();
    run(Cli::parse())
}
