//! HTTP session service for live k-cut audits.
//!
//! JSON API under `/api/v1`; optional static console assets at `/`.

pub mod error;
pub mod routes;
pub mod session;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use kcut_core::distributions::CutRecordSet;

pub use error::{ApiError, ApiResult};
pub use routes::router;
pub use store::SessionStore;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub console_dir: Option<PathBuf>,
    pub records: CutRecordSet,
}

/// Bind and serve until Ctrl-C.
pub async fn serve(config: ServeConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let store = Arc::new(SessionStore::open(&config.data_dir, config.records)?);
    let app = router(store, config.console_dir);
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

