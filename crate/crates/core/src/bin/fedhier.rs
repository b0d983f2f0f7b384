fn main() {
    std::process::exit(fedhier::cli::main());
}
