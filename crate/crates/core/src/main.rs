fn main() {
    std::process::exit(gainfield_kit::cli::run(std::env::args_os()));
}
