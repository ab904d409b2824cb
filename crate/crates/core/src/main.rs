fn main() {
    std::process::exit(fsgl::cli::main_with_args(std::env::args_os()));
}
