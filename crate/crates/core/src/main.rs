fn main() {
    std::process::exit(hadeblur::cli::run(std::env::args_os()));
}
