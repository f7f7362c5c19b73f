fn main() {
    std::process::exit(mfgcn_cli::run(std::env::args_os()));
}
