fn main() {
    std::process::exit(clipbench::cli::run(std::env::args_os()));
}
