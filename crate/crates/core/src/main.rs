fn main() {
    let code = phreg::cli::run(std::env::args_os());
    std::process::exit(code);
}
