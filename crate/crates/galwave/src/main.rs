fn main() {
    std::process::exit(galwave::cli::main());
}
