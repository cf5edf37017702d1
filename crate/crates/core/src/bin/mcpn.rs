use std::process::ExitCode;

fn main() -> ExitCode {
    microcrack::cli::main()
}
