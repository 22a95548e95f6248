fn main() {
    std::process::exit(trendskip_cli::commands::main_with(std::env::args_os()));
}
