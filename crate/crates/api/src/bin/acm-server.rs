use std::path::PathBuf;

use acm_api::{ServerConfig, Service};
use clap::Parser;

/// Runs the acm control plane and its REST API.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// YAML server configuration.
    #[arg(long, env = "ACM_SERVER_CONFIG")]
    config: PathBuf,
    /// Overrides `listen` from the config file.
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();

    let args = Args::parse();
    let mut config = ServerConfig::load(&args.config)?;
    if let Some(listen) = args.listen {
        config.listen = listen;
    }

    let mut service = Service::start(&config)?;
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    tracing::info!("shutting down");
    service.shutdown();
    Ok(())
}
