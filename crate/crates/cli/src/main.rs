fn main() {
    std::process::exit(arbolatent_cli::run(std::env::args_os()));
}
