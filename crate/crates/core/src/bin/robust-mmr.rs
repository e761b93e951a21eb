fn main() {
    std::process::exit(robust_mmr::cli::run(std::env::args_os()));
}
