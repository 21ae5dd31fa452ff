use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = disco::cli::main_with_args(&args, &mut std::io::stderr());
    ExitCode::from(code as u8)
}
