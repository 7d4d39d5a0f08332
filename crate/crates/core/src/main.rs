fn main() {
    std::process::exit(fscil::cli::main_with(std::env::args_os()));
}
