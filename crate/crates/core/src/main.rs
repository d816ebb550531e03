fn main() {
    std::process::exit(bsac::cli::main_with_args(std::env::args_os()));
}
