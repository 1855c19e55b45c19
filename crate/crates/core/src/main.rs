use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(prolap::cli::run(std::env::args_os()))
}
