fn main() {
    std::process::exit(audiotoolagent::cli::main_with_args(std::env::args_os()));
}
