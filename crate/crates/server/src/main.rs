use clap::Parser;
use layerdiff_server::{app, AppState};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "layerdiff-server", version, about = "Serve layerdiff over HTTP/JSON")]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value = layerdiff_api::DEFAULT_ADDR)]
    addr: String,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(&args.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app(AppState::default()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
