fn main() {
    std::process::exit(medoe::cli::run(std::env::args_os()));
}
