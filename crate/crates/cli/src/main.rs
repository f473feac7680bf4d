use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mossti_cli::run(std::env::args_os()))
}
