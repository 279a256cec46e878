fn main() {
    std::process::exit(wavesheet::cli::main_with_args(std::env::args_os()));
}
