fn main() {
    std::process::exit(sadfn::cli::dispatch(std::env::args_os()));
}
