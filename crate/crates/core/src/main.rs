fn main() {
    std::process::exit(anchored_decoding::cli::main(std::env::args_os()));
}
