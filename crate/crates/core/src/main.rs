fn main() {
    std::process::exit(wordprobe::cli::main_with_args(std::env::args_os()));
}
