fn main() {
    std::process::exit(sarcasm_cli::dispatch(std::env::args_os()));
}
