fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ACDC_LOG")).init();
    std::process::exit(acdc::cli::run(std::env::args_os()));
}
