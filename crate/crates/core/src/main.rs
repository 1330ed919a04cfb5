fn main() {
    std::process::exit(evcon::cli::run(std::env::args().skip(1)));
}
