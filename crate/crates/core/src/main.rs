use clap::Parser;
use phaselab::cli::{error_exit_code, run_cli, Cli};

fn main() {
    let cli = Cli::parse();
    let code = match run_cli(&cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    };
    std::process::exit(code);
}
