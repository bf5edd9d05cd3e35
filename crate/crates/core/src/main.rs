fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(multiway_ocs::harness::cli(&argv));
}
