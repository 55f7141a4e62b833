use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(flowattack_cli::run(std::env::args_os()))
}
