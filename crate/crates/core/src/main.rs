fn main() {
    std::process::exit(lateral::cli::dispatch(std::env::args_os()));
}
