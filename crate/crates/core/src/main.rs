use clap::Parser;
use gpusched::cli::{self, Cli, CliError};

fn main() {
    let args = Cli::parse();
    if let Err(err) = run(args) {
        eprintln!("error: {err:#}");
        let code = err.downcast_ref::<CliError>().map_or(4, CliError::exit_code);
        std::process::exit(code);
    }
}

fn run(args: Cli) -> anyhow::Result<()> {
    cli::run(args)?;
    Ok(())
}
