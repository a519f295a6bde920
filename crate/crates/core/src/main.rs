fn main() {
    std::process::exit(srp4ctr::cli::dispatch(std::env::args_os()));
}
