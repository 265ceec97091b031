fn main() {
    std::process::exit(ttalab::cli::main());
}
