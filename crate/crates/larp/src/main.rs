fn main() {
    if let Err(e) = larp::cli::run_from(std::env::args_os()) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
