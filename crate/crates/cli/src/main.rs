use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use odp_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    let result = run(cli, &mut out);
    let flushed = out.flush();
    match (result, flushed) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Err(e), _) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        (Ok(()), Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
