fn main() {
    std::process::exit(ucc::cli::main());
}
