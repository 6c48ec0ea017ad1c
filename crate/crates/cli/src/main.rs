fn main() {
    std::process::exit(spectra_cli::dispatch(std::env::args_os()));
}
