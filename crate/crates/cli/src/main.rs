use std::io;
use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = xq_cli::Cli::parse();
    let stdin = io::stdin();
    let code = xq_cli::run(cli, &mut stdin.lock(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code.clamp(0, 255) as u8)
}
