fn main() {
    std::process::exit(ergopt::cli::main_with_args(std::env::args_os()));
}
