use std::process::ExitCode;

fn main() -> ExitCode {
    symindex::cli::run()
}
