fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NDVG_LOG", "warn")).init();
    std::process::exit(ndvg::cli::run(std::env::args_os()));
}
