fn main() -> std::process::ExitCode {
    lapdog::cli::main()
}
