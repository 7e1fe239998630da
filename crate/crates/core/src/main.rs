fn main() {
    std::process::exit(iris_core::cli::main_with_args(std::env::args_os()));
}
