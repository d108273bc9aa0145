fn main() {
    std::process::exit(landmoe::cli::main_from_env());
}
