//! HTTP API over the ragforge runner: live runs with server-sent step
//! events, corpora and index builds, the pipeline registry and evaluation.
//! Run artifacts use the runner's directory layout, so the CLI and the
//! service can read each other's runs.

pub mod api;
pub mod error;
pub mod indexes;
pub mod mock_api;
pub mod runs;

use std::sync::Arc;

pub use api::{all_schemas, pipeline_descriptors, router, AppState, ServiceConfig};
pub use error::ApiError;
pub use mock_api::{mock_router, MockBackends};
pub use runs::{traces_from_events, RunHandle, RunStatus, StepEvent};

/// Serves the API on an already bound listener until the process stops.
pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}

/// Serves the mock model services on an already bound listener.
pub async fn serve_mock_on(listener: tokio::net::TcpListener, backends: MockBackends) -> std::io::Result<()> {
    log::info!("mock services on http://{}", listener.local_addr()?);
    axum::serve(listener, mock_router(backends)).await
}
