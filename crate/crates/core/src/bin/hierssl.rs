fn main() {
    std::process::exit(hierssl::cli::run(std::env::args_os()));
}
