fn main() {
    std::process::exit(uwloc_cli::run_command(std::env::args_os()));
}
