//! HTTP service for the labeling workflow: upload documents, segment pages
//! into lines, run OCR, store human corrections, export labeled lines and
//! fine-tune registry models on them.
//!
//! ```no_run
//! # async fn run() -> Result<(), Box<dyn std::error::Error>> {
//! let config = kalchas_service::ServiceConfig::load("service.toml")?;
//! kalchas_service::serve(config, async {
//!     let _ = tokio::signal::ctrl_c().await;
//! })
//! .await?;
//! # Ok(())
//! # }
//! ```

pub mod api;
pub mod config;
pub mod error;
pub mod jobs;
pub mod pdf;
pub mod state;
pub mod store;

use std::future::Future;

use log::info;

pub use api::router;
pub use config::{ConfigError, ServiceConfig};
pub use error::ApiError;
pub use state::{AppState, ServiceError, SharedState};

/// Binds the configured address and serves until `shutdown` resolves, then
/// waits for any running fine-tune job to finish.
pub async fn serve(config: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let addr = config.socket_addr()?;
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    info!("waiting for the background job before exiting");
    jobs::wait_for_job(&state).await;
    Ok(())
}
