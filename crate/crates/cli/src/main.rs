fn main() {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = podq_cli::run(std::env::args_os(), &mut stdout) {
        eprintln!("podq: {e}");
        std::process::exit(e.exit_code());
    }
}
