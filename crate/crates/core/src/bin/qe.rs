fn main() {
    std::process::exit(qe_core::cli::main());
}
