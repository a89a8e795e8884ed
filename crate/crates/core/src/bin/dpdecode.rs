fn main() {
    std::process::exit(dpdecode::cli::run(std::env::args_os()));
}
