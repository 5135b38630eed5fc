fn main() {
    std::process::exit(dapconv::cli::run(std::env::args_os()));
}
