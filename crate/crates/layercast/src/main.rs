fn main() {
    std::process::exit(layercast::cli::run());
}
