fn main() {
    std::process::exit(topoguide_cli::run(std::env::args_os()));
}
