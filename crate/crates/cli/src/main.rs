fn main() {
    std::process::exit(contune_cli::run_from(std::env::args_os()));
}
