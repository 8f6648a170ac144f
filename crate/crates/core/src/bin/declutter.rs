fn main() {
    std::process::exit(declutter::cli::run(std::env::args_os()));
}
