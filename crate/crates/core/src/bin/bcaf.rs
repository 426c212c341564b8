fn main() {
    std::process::exit(bcaf_core::cli::main());
}
