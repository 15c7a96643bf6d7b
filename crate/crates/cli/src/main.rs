fn main() {
    std::process::exit(uma_cli::main_with_args(std::env::args_os()));
}
