fn main() {
    std::process::exit(vidfuse::cli::main_with_args(std::env::args_os()));
}
