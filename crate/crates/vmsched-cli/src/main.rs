use clap::Parser;

fn main() {
    vmsched_cli::init_logging();
    let cli = vmsched_cli::Cli::parse();
    if let Err(err) = vmsched_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
