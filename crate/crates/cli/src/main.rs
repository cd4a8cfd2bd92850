fn main() {
    std::process::exit(mom_cli::main_with(std::env::args_os()));
}
