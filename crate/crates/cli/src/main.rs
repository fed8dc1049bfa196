use std::process::ExitCode;

fn main() -> ExitCode {
    mcaoan_cli::main_with(std::env::args_os())
}
