fn main() {
    std::process::exit(pit_core::cli::cli_main(std::env::args_os()));
}
