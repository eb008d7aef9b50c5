fn main() {
    std::process::exit(chorlam::cli::run_cli());
}
