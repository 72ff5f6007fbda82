fn main() {
    let env = std::env::vars().collect();
    std::process::exit(eow_cli::run(std::env::args_os(), &env));
}
