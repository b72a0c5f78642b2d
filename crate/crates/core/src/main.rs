fn main() {
    std::process::exit(valpat::cli::run(std::env::args_os()));
}
