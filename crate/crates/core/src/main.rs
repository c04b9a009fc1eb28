fn main() {
    std::process::exit(casecross::cli::main_with_args(std::env::args_os()));
}
