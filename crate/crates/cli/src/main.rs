fn main() {
    std::process::exit(coatnet_cli::run(std::env::args_os()));
}
