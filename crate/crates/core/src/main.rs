fn main() {
    std::process::exit(cxr_fusion::cli::main_exit());
}
