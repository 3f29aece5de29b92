use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let stdin = io::stdin();
    let code = grumt_cli::dispatch(
        std::env::args_os().skip(1),
        &mut stdin.lock(),
        &mut io::stdout().lock(),
        &mut io::stderr().lock(),
    );
    ExitCode::from(code.clamp(0, 255) as u8)
}
