fn main() {
    std::process::exit(orsp::cli::run(std::env::args_os()));
}
