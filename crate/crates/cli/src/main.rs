fn main() {
    std::process::exit(ossbb_cli::run(std::env::args_os()));
}
