fn main() {
    std::process::exit(skx::run(std::env::args_os()));
}
