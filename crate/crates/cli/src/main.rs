fn main() {
    std::process::exit(clcp_cli::run_command(std::env::args_os()));
}
