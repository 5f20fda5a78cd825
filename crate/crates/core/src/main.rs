fn main() {
    std::process::exit(pathprobe::cli::cli_dispatch(std::env::args_os()));
}
