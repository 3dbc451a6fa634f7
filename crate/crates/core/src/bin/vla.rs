fn main() {
    std::process::exit(vla_core::cli::main());
}
