fn main() {
    let env = env_logger::Env::default().default_filter_or("info");
    env_logger::Builder::from_env(env)
        .format_timestamp_secs()
        .init();
    std::process::exit(qmfa::cli::run(std::env::args_os()));
}
