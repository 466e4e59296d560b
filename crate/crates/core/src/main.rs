fn main() {
    std::process::exit(counterpoint::cli::main_with_args(std::env::args_os()));
}
