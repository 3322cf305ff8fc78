fn main() {
    std::process::exit(flowreg::cli::run(std::env::args_os()));
}
