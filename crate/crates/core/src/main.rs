fn main() {
    std::process::exit(conceptkit::cli::run(std::env::args_os()));
}
