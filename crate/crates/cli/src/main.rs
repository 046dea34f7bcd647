use clap::Parser;
use quantnet_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(outcome) => {
            if !cli.quiet && !outcome.stdout.is_empty() {
                println!("{}", outcome.stdout);
            }
            std::process::exit(outcome.code);
        }
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}
