fn main() {
    std::process::exit(banet::cli::run(std::env::args_os()));
}
