fn main() {
    std::process::exit(gistlab::expcli::main_with_args(std::env::args_os()));
}
