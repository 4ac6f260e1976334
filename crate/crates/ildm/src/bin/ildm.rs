fn main() {
    // CLI wiring arrives with the cli module.
    std::process::exit(ildm::cli_main());
}
