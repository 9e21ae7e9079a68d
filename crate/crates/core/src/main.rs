use std::process::ExitCode;

fn main() -> ExitCode {
    match svr_core::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("svr: {e}");
            ExitCode::FAILURE
        }
    }
}
