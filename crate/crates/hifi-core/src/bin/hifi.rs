fn main() {
    std::process::exit(hifi_core::cli::run_from(std::env::args_os()));
}
