fn main() -> std::process::ExitCode {
    otkit::cli::main_entry()
}
