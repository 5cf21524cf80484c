fn main() {
    std::process::exit(wentzell::cli::main_with_args(std::env::args_os()));
}
