fn main() {
    std::process::exit(segmentor::cli::run(std::env::args_os()));
}
