fn main() {
    std::process::exit(vsediv::cli::run());
}
