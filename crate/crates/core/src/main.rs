use std::process::ExitCode;

fn main() -> ExitCode {
    ditsim::cli::run_cli(std::env::args_os())
}
