use clap::Parser;

fn main() {
    let cli = semsplat::cli::Cli::parse();
    if let Err(e) = semsplat::cli::run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
