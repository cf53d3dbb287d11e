fn main() {
    std::process::exit(counterbias::cli::main_with_args(std::env::args_os()));
}
