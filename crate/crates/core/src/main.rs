fn main() {
    std::process::exit(avae::cli::run());
}
