use std::process::ExitCode;

fn main() -> ExitCode {
    genrank::cli::main_with_args(std::env::args_os())
}
