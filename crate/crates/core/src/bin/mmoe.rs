fn main() {
    std::process::exit(mmoe::cli::run_cli(std::env::args_os()));
}
