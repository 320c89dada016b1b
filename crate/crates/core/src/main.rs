fn main() {
    std::process::exit(grutrack::cli::run_cli(std::env::args_os()));
}
