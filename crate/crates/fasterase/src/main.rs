fn main() {
    std::process::exit(fasterase::cli::run());
}
