use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pencil_poisson::bench::cli::cli_main(std::env::args()) as u8)
}
