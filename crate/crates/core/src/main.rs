use std::process::ExitCode;

fn main() -> ExitCode {
    ntg_core::cli::main_with(std::env::args_os())
}
