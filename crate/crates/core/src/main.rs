fn main() {
    std::process::exit(dysfluency::cli::run(std::env::args_os()));
}
