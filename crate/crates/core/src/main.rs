fn main() {
    latentwear::cli::configure_threads();
    std::process::exit(latentwear::cli::run(std::env::args().collect()));
}
