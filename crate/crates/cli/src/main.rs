fn main() {
    std::process::exit(fusionhead_cli::main_with_args(std::env::args_os()));
}
