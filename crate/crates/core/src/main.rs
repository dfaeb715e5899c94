fn main() {
    std::process::exit(treeseg::cli::main_with_args(std::env::args_os()));
}
