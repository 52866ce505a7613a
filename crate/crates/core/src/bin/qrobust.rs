fn main() {
    std::process::exit(qrobust::cli::run_cli(std::env::args_os()));
}
