use clap::Parser;

fn main() {
    let cli = xfields_cli::Cli::parse();
    if let Err(e) = xfields_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
