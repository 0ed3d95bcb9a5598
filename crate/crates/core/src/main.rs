fn main() {
    std::process::exit(cystonet::cli::main_with(std::env::args_os()));
}
