fn main() {
    std::process::exit(offroad::cli::run(std::env::args_os()));
}
