fn main() {
    std::process::exit(featmerge::cli::run(std::env::args_os()));
}
