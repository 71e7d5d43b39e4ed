fn main() {
    std::process::exit(memlm::cli::dispatch(std::env::args().collect()));
}
