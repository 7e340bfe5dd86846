fn main() {
    std::process::exit(anchor_reid::cli::run(std::env::args_os()));
}
