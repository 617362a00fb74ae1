fn main() {
    std::process::exit(tmt::cli::main());
}
