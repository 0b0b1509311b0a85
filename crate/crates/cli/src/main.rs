fn main() {
    std::process::exit(scan_cli::cli_main(std::env::args_os()));
}
