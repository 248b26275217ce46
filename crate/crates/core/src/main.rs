use clap::Parser;
use tapnet::cli::{self, Cli, CliError, EXIT_DATA, EXIT_NONCONVERGED};

fn main() {
    let cli = Cli::parse();
    match cli::run(&cli) {
        Ok(()) => {}
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            std::process::exit(EXIT_DATA);
        }
        Err(CliError::NonConverged(m)) => {
            eprintln!("error: {m}");
            std::process::exit(EXIT_NONCONVERGED);
        }
    }
}
