fn main() {
    std::process::exit(selfonn::cli::run());
}
