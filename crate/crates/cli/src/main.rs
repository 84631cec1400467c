use clap::Parser;

fn main() {
    let cli = echostate_cli::Cli::parse();
    if let Err(e) = echostate_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
