fn main() -> std::process::ExitCode {
    cchmm::cli::main()
}
