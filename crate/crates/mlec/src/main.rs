fn main() {
    std::process::exit(mlec::cli::run());
}
