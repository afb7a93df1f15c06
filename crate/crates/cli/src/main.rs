fn main() {
    std::process::exit(pcml_cli::main_with(std::env::args_os()));
}
