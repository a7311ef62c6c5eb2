use std::process::ExitCode;

fn main() -> ExitCode {
    pow_rmab::cli::run(std::env::args_os())
}
