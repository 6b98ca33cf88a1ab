fn main() {
    std::process::exit(prefnet_cli::run(std::env::args_os()));
}
