fn main() {
    std::process::exit(eccm::cli::main_with_args(std::env::args_os()));
}
