fn main() {
    std::process::exit(concatenet_cli::run_cli(std::env::args_os()));
}
