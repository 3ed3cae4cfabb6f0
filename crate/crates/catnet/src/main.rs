fn main() {
    std::process::exit(catnet::cli::dispatch(std::env::args()));
}
