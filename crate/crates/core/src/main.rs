fn main() {
    std::process::exit(alc::cli::run(std::env::args_os()));
}
