fn main() {
    std::process::exit(querysep::cli::run(std::env::args().skip(1).collect()));
}
