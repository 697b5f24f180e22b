fn main() {
    std::process::exit(grle::cli::run_cli(std::env::args_os()));
}
