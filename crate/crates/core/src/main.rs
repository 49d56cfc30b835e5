fn main() {
    std::process::exit(gatefuse::cli::main_with_args(std::env::args_os()));
}
