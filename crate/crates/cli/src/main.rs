use clap::Parser;

fn main() {
    let cli = notewise_cli::Cli::parse();
    if let Err(e) = notewise_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
