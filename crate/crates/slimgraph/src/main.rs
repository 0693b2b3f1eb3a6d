fn main() {
    std::process::exit(slimgraph::cli::run(std::env::args_os()));
}
