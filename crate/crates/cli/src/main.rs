use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pointtpa_cli::run(std::env::args_os()))
}
