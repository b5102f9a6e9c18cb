fn main() {
    let code = rminar::cli::parse_and_dispatch(std::env::args());
    std::process::exit(code);
}
