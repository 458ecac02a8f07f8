fn main() {
    std::process::exit(topicalign::cli::main_with_args(std::env::args_os()));
}
