fn main() {
    std::process::exit(saliency_sanity::cli::main_with_args(std::env::args_os()));
}
