fn main() {
    std::process::exit(dmc_cli::run(std::env::args_os()));
}
