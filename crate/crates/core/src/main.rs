fn main() {
    std::process::exit(speakerkws::cli::run(std::env::args_os()));
}
