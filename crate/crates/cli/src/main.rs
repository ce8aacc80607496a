fn main() {
    std::process::exit(lataug_cli::run(std::env::args_os()));
}
