fn main() {
    std::process::exit(cspnet_harness::cli::main(std::env::args_os()));
}
