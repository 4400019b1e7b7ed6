fn main() {
    std::process::exit(hacover::cli::run(std::env::args_os()));
}
