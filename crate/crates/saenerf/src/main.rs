fn main() {
    std::process::exit(saenerf::cli::run());
}
