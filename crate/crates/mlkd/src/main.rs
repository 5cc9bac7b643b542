fn main() {
    std::process::exit(mlkd::cli::run(std::env::args_os()));
}
