use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = salt_mpc::cli::Args::parse();
    std::process::exit(salt_mpc::cli::main_with(&args));
}
