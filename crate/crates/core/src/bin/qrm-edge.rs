fn main() -> std::process::ExitCode {
    qrm_edge::cli::main()
}
