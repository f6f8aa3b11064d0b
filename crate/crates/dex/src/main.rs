fn main() -> std::process::ExitCode {
    dex::cli::main()
}
