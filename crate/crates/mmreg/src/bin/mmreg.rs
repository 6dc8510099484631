fn main() {
    std::process::exit(mmreg::cli::cli_main(std::env::args_os()));
}
