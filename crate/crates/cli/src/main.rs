fn main() {
    std::process::exit(mlpf_cli::run_cli(std::env::args_os()));
}
