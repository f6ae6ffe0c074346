fn main() -> std::process::ExitCode {
    fkp::cli::main_with(std::env::args_os())
}
