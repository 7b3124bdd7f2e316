fn main() {
    std::process::exit(uplab::cli::dispatch(std::env::args_os()));
}
