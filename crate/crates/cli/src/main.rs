use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(msbi_cli::run_from(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    ))
}
