fn main() {
    std::process::exit(safe_fbsde::cli::main_with_args(std::env::args_os()));
}
