fn main() {
    std::process::exit(dykonem::cli::main_exit_code());
}
