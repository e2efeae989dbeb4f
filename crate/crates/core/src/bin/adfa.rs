fn main() {
    std::process::exit(adfa::cli::main_with_args(std::env::args_os()));
}
