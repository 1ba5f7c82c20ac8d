fn main() {
    std::process::exit(owa_rank_cli::run(std::env::args_os()));
}
