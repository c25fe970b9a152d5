fn main() {
    std::process::exit(bathy::cli::run(std::env::args_os()));
}
