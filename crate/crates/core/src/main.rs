fn main() {
    std::process::exit(daps::cli::main(std::env::args_os()));
}
