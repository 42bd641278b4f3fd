fn main() {
    std::process::exit(mixseg::cli::run(std::env::args_os()));
}
