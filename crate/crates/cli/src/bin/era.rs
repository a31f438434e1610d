fn main() {
    std::process::exit(era_cli::run(std::env::args_os()));
}
