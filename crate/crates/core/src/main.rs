fn main() {
    std::process::exit(ctas::cli::run(std::env::args_os()));
}
