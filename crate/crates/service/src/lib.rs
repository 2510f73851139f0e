//! HTTP façade over the retrieval engine: slide browsing, tile and
//! thumbnail serving, ROI queries with cached results, and similarity
//! heatmaps.
//!
//! Endpoints (JSON unless noted):
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/health` | `{"status":"ok","slides":N}` |
//! | GET | `/api/slides` | catalog listing |
//! | GET | `/api/slides/{id}/meta` | one slide, with its tile grid |
//! | GET | `/api/slides/{id}/tiles/{x}/{y}` | PNG tile |
//! | GET | `/api/slides/{id}/thumbnail` | PNG, longest side at most 1024 px |
//! | POST | `/api/queries` | submit an ROI query |
//! | GET | `/api/queries/{id}` | status and ranked result |
//! | GET | `/api/queries/{id}/heatmap/{slide_id}` | similarity grid |
//!
//! Errors are `{"error": "..."}` with a matching status code. Query ids are
//! derived from the request content, so identical requests share one cached
//! result. Queries over at most `sync_tile_limit` candidate tiles finish
//! before the POST returns (200); larger ones run in the background (202)
//! and are polled.

mod error;
mod handlers;
mod state;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;

use axum::routing::{get, post};
use axum::Router;
use slidecurate_core::retrieval::EmbedderSpec;
use tokio::net::TcpListener;

pub use error::ApiError;
pub use state::AppState;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_SYNC_TILE_LIMIT: usize = 10_000;
pub const THUMBNAIL_MAX: u32 = 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store: PathBuf,
    pub manifest: PathBuf,
    /// Tile list (JSON Lines) used for grids of slides outside the store.
    pub tiles: Option<PathBuf>,
    pub bind: SocketAddr,
    pub tile_size: u32,
    /// Withhold diagnoses of slides that are not in the store.
    pub hide_query_diagnoses: bool,
    pub sync_tile_limit: usize,
    /// Embeds ROIs of slides that are not in the store.
    pub embedder: EmbedderSpec,
    pub cache_capacity: usize,
}

impl ServiceConfig {
    pub fn new(store: impl Into<PathBuf>, manifest: impl Into<PathBuf>) -> Self {
        Self {
            store: store.into(),
            manifest: manifest.into(),
            tiles: None,
            bind: DEFAULT_BIND.parse().expect("valid default address"),
            tile_size: slidecurate_core::catalog::DEFAULT_TILE_SIZE,
            hide_query_diagnoses: false,
            sync_tile_limit: DEFAULT_SYNC_TILE_LIMIT,
            embedder: EmbedderSpec::Features,
            cache_capacity: 1024,
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(handlers::health))
        .route("/api/slides", get(handlers::list_slides))
        .route("/api/slides/{id}/meta", get(handlers::slide_meta))
        .route("/api/slides/{id}/tiles/{x}/{y}", get(handlers::tile))
        .route("/api/slides/{id}/thumbnail", get(handlers::thumbnail))
        .route("/api/queries", post(handlers::submit_query))
        .route("/api/queries/{id}", get(handlers::get_query))
        .route("/api/queries/{id}/heatmap/{slide_id}", get(handlers::heatmap))
        .fallback(handlers::not_found)
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    state: AppState,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Loads the store and catalog, binds, and serves until Ctrl-C.
pub async fn run(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let cfg = config.clone();
    let state = tokio::task::spawn_blocking(move || AppState::load(&cfg)).await??;
    let listener = TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    serve(state, listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
