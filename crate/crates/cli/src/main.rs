fn main() {
    std::process::exit(sewercast_cli::run(std::env::args_os()));
}
