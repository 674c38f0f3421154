fn main() {
    std::process::exit(reflearn::cli::parse_and_dispatch(std::env::args_os()));
}
