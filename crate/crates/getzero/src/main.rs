use std::process::ExitCode;

fn main() -> ExitCode {
    getzero::cli::main_with(std::env::args_os())
}
