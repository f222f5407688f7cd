fn main() {
    std::process::exit(scout::cli::main().into());
}
