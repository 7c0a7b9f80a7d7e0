fn main() {
    std::process::exit(ragx::cli::main_with_args(std::env::args_os()));
}
