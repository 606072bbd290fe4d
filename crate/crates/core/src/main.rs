fn main() {
    std::process::exit(fedmanip::cli::dispatch(std::env::args_os()));
}
