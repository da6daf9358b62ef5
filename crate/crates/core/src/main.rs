fn main() {
    std::process::exit(sfcn::cli::main_with_args(std::env::args_os()));
}
