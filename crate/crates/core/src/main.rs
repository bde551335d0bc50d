fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(diffpose::cli::run(&argv));
}
