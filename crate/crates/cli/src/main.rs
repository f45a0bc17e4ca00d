fn main() {
    std::process::exit(webal_cli::run(std::env::args_os()));
}
