fn main() {
    std::process::exit(ba3c::cli::run(std::env::args_os()));
}
