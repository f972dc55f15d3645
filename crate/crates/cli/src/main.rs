fn main() {
    std::process::exit(mfp_cli::run_cli(std::env::args_os()));
}
