fn main() {
    std::process::exit(dual_mfa::cli::run(std::env::args_os()));
}
