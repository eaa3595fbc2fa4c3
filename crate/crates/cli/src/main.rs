fn main() {
    std::process::exit(retro_cli::run(std::env::args_os()));
}
