fn main() -> std::process::ExitCode {
    moodgen::cli::main()
}
