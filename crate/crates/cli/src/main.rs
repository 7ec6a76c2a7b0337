fn main() {
    std::process::exit(glyphgen_cli::run_from(std::env::args_os()));
}
