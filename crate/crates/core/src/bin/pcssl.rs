fn main() {
    std::process::exit(pcssl::cli::main_with_args(std::env::args_os()));
}
