fn main() {
    std::process::exit(lungseg::cli::run(std::env::args_os()));
}
