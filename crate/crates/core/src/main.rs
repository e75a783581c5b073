fn main() {
    std::process::exit(adco::cli::main_with_args(std::env::args_os()));
}
