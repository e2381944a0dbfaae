use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = plmcast::cli::Cli::parse();
    if let Err(e) = plmcast::cli::run(cli) {
        eprintln!("{}", plmcast::cli::error_record(&e));
        std::process::exit(1);
    }
}
