use std::io::{stderr, stdout};
use std::process::ExitCode;

fn main() -> ExitCode {
    if let Err(e) = sasv::cli::init_threads() {
        eprintln!("sasv: error[{}]: {e}", e.kind());
        return ExitCode::from(1);
    }
    let code = sasv::cli::dispatch(std::env::args_os(), &mut stdout().lock(), &mut stderr().lock());
    ExitCode::from(code as u8)
}
