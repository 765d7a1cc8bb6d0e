fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(palp_lab::cli::run(&argv));
}
