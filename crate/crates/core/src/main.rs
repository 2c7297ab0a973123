fn main() {
    std::process::exit(shear::cli::main_with_args(std::env::args_os()));
}
