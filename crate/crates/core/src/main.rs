fn main() {
    std::process::exit(cacheprobe::cli::run(std::env::args()));
}
