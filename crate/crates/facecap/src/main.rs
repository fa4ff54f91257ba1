use std::process::ExitCode;

fn main() -> ExitCode {
    facecap::cli::main_with_args(std::env::args_os())
}
