fn main() -> std::process::ExitCode {
    robustlab::cli::main_with(std::env::args_os())
}
