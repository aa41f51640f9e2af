fn main() {
    std::process::exit(uagc::cli::run());
}
