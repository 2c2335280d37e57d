fn main() -> std::process::ExitCode {
    consensus_diffusion::cli::main()
}
