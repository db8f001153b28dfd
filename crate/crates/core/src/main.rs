fn main() {
    std::process::exit(tensorar::cli::run(std::env::args_os()));
}
