fn main() {
    std::process::exit(scoremix::cli::run(std::env::args_os()));
}
