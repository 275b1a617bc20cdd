fn main() {
    std::process::exit(delayrate::cli::run(std::env::args_os()));
}
