fn main() {
    std::process::exit(spikeinv::cli::main_with_args(std::env::args_os()));
}
