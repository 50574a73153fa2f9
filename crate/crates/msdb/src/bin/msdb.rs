fn main() {
    std::process::exit(msdb::cli::dispatch(std::env::args()));
}
