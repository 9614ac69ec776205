fn main() {
    std::process::exit(cluenet::cli::run(std::env::args_os()));
}
