fn main() -> std::process::ExitCode {
    bridgelab::cli::main()
}
