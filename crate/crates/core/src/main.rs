fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    segdiscover::par::init_thread_pool_from_env();
    std::process::exit(segdiscover::cli::run(std::env::args_os()));
}
