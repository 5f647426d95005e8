use std::process::ExitCode;

fn main() -> ExitCode {
    crf_core::cli::main_with_args(std::env::args_os())
}
