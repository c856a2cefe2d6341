fn main() {
    std::process::exit(lowrank_panel::cli::run(std::env::args_os()));
}
