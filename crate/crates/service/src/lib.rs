//! HTTP facade over the planning formulas and simulation experiments, with
//! scenarios and job results persisted under a data directory.

mod api_error;
mod config;
mod jobs;
mod routes;
mod store;

pub use api_error::{ApiError, ErrorBody};
pub use config::ServiceConfig;
pub use jobs::{JobKind, JobRecord, JobStatus};
pub use routes::{router, AppState};
pub use store::{is_valid_name, Store};

pub use axum::Router;

use std::io;
use std::sync::Arc;

use tokio::net::TcpListener;

/// Opens the data directory, restores persisted jobs and starts the worker.
///
/// Must be called from within a Tokio runtime.
pub fn app(config: ServiceConfig) -> io::Result<(Router, Arc<AppState>)> {
    let state = AppState::start(config)?;
    Ok((router(state.clone()), state))
}

/// Serves on `listener` until Ctrl-C.
pub async fn serve(config: ServiceConfig, listener: TcpListener) -> io::Result<()> {
    let (router, _) = app(config)?;
    serve_router(listener, router).await
}

/// Serves an already built router until Ctrl-C.
pub async fn serve_router(listener: TcpListener, router: Router) -> io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
