fn main() {
    std::process::exit(fedsel::cli::main_from_env());
}
