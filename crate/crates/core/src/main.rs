fn main() {
    std::process::exit(ilitrack::cli::main_with_args(std::env::args_os()));
}
