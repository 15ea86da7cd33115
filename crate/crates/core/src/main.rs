fn main() {
    std::process::exit(selfpose::cli::run(std::env::args_os()));
}
