use clap::Parser;
use tsfactor::cli::{Cli, run};

fn main() {
    std::process::exit(run(Cli::parse()));
}
