fn main() {
    std::process::exit(harmoq::cli::execute(std::env::args_os()));
}
