use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use aura_core::home::Home;
use aura_service::{router, serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "aura-service", version, about = "HTTP service for the AURA risk-assessment engine")]
struct Args {
    /// Address to listen on.
    #[arg(long, env = "AURA_BIND", default_value = "127.0.0.1:8750")]
    bind: SocketAddr,
    /// State directory; defaults to $AURA_HOME or ~/.aura.
    #[arg(long)]
    home: Option<PathBuf>,
    /// Bearer token required by protected routes.
    #[arg(long, env = "AURA_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Operator recorded for edits that do not name one.
    #[arg(long, env = "AURA_OPERATOR", default_value = "service")]
    operator: String,
    /// Allowed console origin; repeatable. Any origin when omitted.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("AURA_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let home = match Home::from_env() {
        Ok(h) => match &args.home {
            Some(root) => h.with_root(root),
            None => h,
        },
        Err(e) => {
            tracing::error!(error = %e, "bad environment");
            return ExitCode::from(1);
        }
    };
    let engine = match home
        .load_config()
        .and_then(|cfg| {
            if cfg.memory.url.is_some() {
                tracing::warn!("memory.url is ignored by the service; serving the local store");
            }
            home.open_engine(cfg, None)
        }) {
        Ok(e) => e,
        Err(e) => {
            tracing::error!(error = %e, home = %home.root().display(), "cannot open state");
            return ExitCode::from(2);
        }
    };
    if args.token.is_none() {
        tracing::warn!("no token configured; every route is open");
    }
    let state = AppState::new(engine, Some(home))
        .with_token(args.token)
        .with_operator(args.operator);
    let app = router(Arc::new(state), &args.cors_origins);
    let listener = match tokio::net::TcpListener::bind(args.bind).await {
        Ok(l) => l,
        Err(e) => {
            tracing::error!(error = %e, bind = %args.bind, "cannot listen");
            return ExitCode::from(2);
        }
    };
    tracing::info!(bind = %args.bind, "listening");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match serve(listener, app, shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "server failed");
            ExitCode::from(2)
        }
    }
}
