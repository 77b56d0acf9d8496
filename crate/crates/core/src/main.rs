fn main() {
    std::process::exit(mfg_core::cli::run_from_env());
}
