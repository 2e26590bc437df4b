fn main() {
    let code = advlab::harness::cli::run_cli(std::env::args().skip(1));
    std::process::exit(code);
}
