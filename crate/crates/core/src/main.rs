use clap::Parser;

use bsvsr::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("bsvsr: {e}");
        std::process::exit(exit_code(&e));
    }
}
