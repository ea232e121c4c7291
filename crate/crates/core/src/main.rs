fn main() {
    std::process::exit(emofuse::cli::run());
}
