fn main() {
    std::process::exit(ecgalign_cli::run(std::env::args().collect()));
}
