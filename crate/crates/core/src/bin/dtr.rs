fn main() {
    std::process::exit(dtr_core::harness::cli::cli_dispatch(std::env::args_os()));
}
