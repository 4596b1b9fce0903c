fn main() {
    std::process::exit(hwid_cli::app::run(std::env::args_os()));
}
