fn main() -> std::process::ExitCode {
    mtvif_cli::main_with_args()
}
