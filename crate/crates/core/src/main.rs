fn main() {
    std::process::exit(mctseg::cli::main_with(std::env::args_os()));
}
