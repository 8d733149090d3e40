fn main() {
    std::process::exit(pathfuse::cli::main_with_args(std::env::args_os()));
}
