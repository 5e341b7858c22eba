//! HTTP front end: streamed answers with cited sources, feedback intake,
//! history export, model registry and live reindexing.

pub mod api;
pub mod config;
pub mod error;
pub mod events;
pub mod state;

use std::future::Future;
use std::sync::Arc;

pub use api::router;
pub use config::{ConfigError, ServiceConfig};
pub use error::ApiError;
pub use events::{decode_all, DoneData, EventStreamDecoder, QueryEvent, SourceRef};
pub use state::{AppState, ReindexError, ReindexReport, StartupError};

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve<F>(listener: tokio::net::TcpListener, state: Arc<AppState>, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Binds the configured address and serves until Ctrl-C.
pub async fn run(config: ServiceConfig) -> Result<(), RunError> {
    let bind = config.bind.clone();
    let state = tokio::task::spawn_blocking(move || AppState::from_config(config))
        .await
        .map_err(|e| RunError::Io(std::io::Error::other(e)))??;
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve(listener, Arc::new(state), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Startup(#[from] StartupError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
