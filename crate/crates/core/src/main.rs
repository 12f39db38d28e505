fn main() {
    std::process::exit(eeg_refine::cli::execute(std::env::args_os()));
}
