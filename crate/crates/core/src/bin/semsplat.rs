fn main() {
    std::process::exit(semsplat::cli::run(std::env::args_os()));
}
