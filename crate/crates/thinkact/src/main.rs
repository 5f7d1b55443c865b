fn main() {
    std::process::exit(thinkact::cli::main_with(std::env::args_os()));
}
