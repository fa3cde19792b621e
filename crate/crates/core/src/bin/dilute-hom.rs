fn main() {
    std::process::exit(dilute_hom::cli::run(std::env::args_os()));
}
