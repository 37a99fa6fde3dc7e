use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ndp::cli::dispatch(std::env::args_os()) as u8)
}
