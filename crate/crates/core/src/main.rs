fn main() {
    std::process::exit(bitsird::cli::run(std::env::args_os()));
}
