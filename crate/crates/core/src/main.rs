fn main() -> std::process::ExitCode {
    memplan::cli::main()
}
