fn main() {
    std::process::exit(mdd_cli::run(std::env::args_os()));
}
