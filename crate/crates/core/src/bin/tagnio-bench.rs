fn main() {
    std::process::exit(tagnio::cli::main_with(std::env::args_os()));
}
