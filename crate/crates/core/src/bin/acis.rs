fn main() {
    std::process::exit(acis::experiments::cli::run(std::env::args_os()));
}
