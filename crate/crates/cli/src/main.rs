use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(docalign_cli::run(std::env::args_os()))
}
