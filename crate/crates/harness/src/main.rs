use std::process::ExitCode;

fn main() -> ExitCode {
    draft_lab::cli::main_with_args(std::env::args())
}
