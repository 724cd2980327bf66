use std::io;
use std::process::ExitCode;

use acm_cli::exit::Exit;
use acm_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { Exit::Invalid } else { Exit::Ok };
            return ExitCode::from(code.code() as u8);
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(exit) => ExitCode::from(exit.code() as u8),
        Err(e) => {
            eprintln!("acmctl: {e}");
            ExitCode::from(e.exit.code() as u8)
        }
    }
}
