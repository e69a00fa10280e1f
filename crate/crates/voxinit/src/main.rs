fn main() {
    std::process::exit(voxinit::cli::run(std::env::args_os()));
}
