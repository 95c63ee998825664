fn main() {
    std::process::exit(crowdflow_service::cli::main());
}
