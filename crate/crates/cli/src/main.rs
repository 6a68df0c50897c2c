fn main() {
    std::process::exit(pdvae_cli::main_with_args(std::env::args_os()));
}
