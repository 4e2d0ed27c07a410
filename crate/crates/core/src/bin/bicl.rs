fn main() {
    std::process::exit(bicl::cli::run(std::env::args().skip(1)));
}
