fn main() {
    std::process::exit(peerstrat_cli::main_with_args(std::env::args_os()));
}
