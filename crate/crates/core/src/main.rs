use agde::cli;

#[tokio::main]
async fn main() {
    env_logger::init();
    if let Err(error) = cli::run(std::env::args_os()).await {
        eprintln!("error: {error}");
        std::process::exit(error.exit_code());
    }
}
