fn main() {
    std::process::exit(rttd::cli::main_entry());
}
