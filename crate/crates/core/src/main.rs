fn main() {
    std::process::exit(feedsynth::cli::main_with_args(std::env::args_os()));
}
