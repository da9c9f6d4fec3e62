fn main() {
    std::process::exit(emberish::cli::run(std::env::args_os()));
}
