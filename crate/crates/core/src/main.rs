use clap::Parser;

use branchkit::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => eprintln!("{}", summary.line),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
