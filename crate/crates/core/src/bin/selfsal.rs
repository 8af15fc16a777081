fn main() {
    std::process::exit(selfsal::cli::run(std::env::args_os()));
}
