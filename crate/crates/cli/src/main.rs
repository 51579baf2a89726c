fn main() {
    std::process::exit(eki_cli::main_with_args(std::env::args_os()));
}
