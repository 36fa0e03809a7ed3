fn main() {
    std::process::exit(exin::cli::main_with_args(std::env::args_os()));
}
