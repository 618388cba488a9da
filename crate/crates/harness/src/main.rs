fn main() {
    std::process::exit(supermarket_harness::cli::run(std::env::args_os()));
}
