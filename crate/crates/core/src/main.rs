use clap::Parser;

fn main() {
    let cli = ropeweaver::cli::Cli::parse();
    if let Err(e) = ropeweaver::cli::run(cli) {
        let (code, body) = ropeweaver::cli::error_report(&e);
        eprintln!("{body}");
        std::process::exit(code);
    }
}
