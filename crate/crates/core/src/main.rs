use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LONGHAZ_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let args = longhaz::cli::Args::parse();
    std::process::exit(longhaz::cli::run(&args));
}
