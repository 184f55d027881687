fn main() {
    std::process::exit(pavedet_cli::run(std::env::args_os()));
}
