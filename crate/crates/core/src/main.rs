use clap::Parser;

fn main() {
    let cli = capsnet::cli::Cli::parse();
    if let Err(e) = capsnet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
