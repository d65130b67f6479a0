fn main() {
    std::process::exit(pemadm::cli::run(std::env::args_os()));
}
