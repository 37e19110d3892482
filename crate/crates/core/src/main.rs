fn main() {
    std::process::exit(tgmm_core::cli::run(std::env::args_os()));
}
