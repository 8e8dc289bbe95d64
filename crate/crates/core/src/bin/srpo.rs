fn main() {
    std::process::exit(srpo_lab::experiments::cli_main(std::env::args_os()));
}
