fn main() {
    std::process::exit(layerdiff_client::cli::run(std::env::args_os()));
}
