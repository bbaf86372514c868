use std::process::ExitCode;

fn main() -> ExitCode {
    actplan::cli::main_with_args(std::env::args_os())
}
