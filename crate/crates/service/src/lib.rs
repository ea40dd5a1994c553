//! HTTP and WebSocket front end for trained models.
//!
//! Endpoints:
//! - `GET /health`
//! - `POST /train`: corpus plus optional preset and config overrides, returns a model id
//! - `GET /models/{id}`: model summary (`?full=true` adds the model file)
//! - `POST /models/{id}/field`: vector field and epistemic variance on a grid
//! - `GET /models/{id}/rollout` (WebSocket): live rollout steered by `set_context` messages

mod api;
mod error;
mod session;
mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;

pub use error::ApiError;
pub use session::{ClientMessage, ContextChange, ServerMessage, StepFrame};
pub use store::{ModelStore, StoredModel};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Models kept in memory before the least recently used is evicted.
    pub capacity: usize,
    /// Optional directory models are written to and reloaded from after eviction.
    pub store_dir: Option<PathBuf>,
    /// Live rollout pace in steps per second.
    pub rate_hz: f64,
    pub field_cache: usize,
    /// Display frames buffered per session before frames are dropped.
    pub frame_buffer: usize,
    /// Training config used when a request names no preset.
    pub defaults: ctxkmp::TrainConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            capacity: 16,
            store_dir: None,
            rate_hz: 20.0,
            field_cache: 64,
            frame_buffer: 64,
            defaults: ctxkmp::TrainConfig::lasa(),
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ctxkmp::Error> {
        if self.capacity == 0 || self.field_cache == 0 || self.frame_buffer == 0 {
            return Err(ctxkmp::Error::Config("capacity, field cache and frame buffer must be at least 1".into()));
        }
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            return Err(ctxkmp::Error::Config("rate_hz must be positive".into()));
        }
        self.defaults.validate()
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub models: Mutex<ModelStore>,
    fields: Mutex<lru::LruCache<String, Arc<serde_json::Value>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Arc<Self>, ctxkmp::Error> {
        config.validate()?;
        let size = |n: usize| std::num::NonZeroUsize::new(n).expect("validated");
        Ok(Arc::new(AppState {
            models: Mutex::new(ModelStore::new(size(config.capacity), config.store_dir.clone())),
            fields: Mutex::new(lru::LruCache::new(size(config.field_cache))),
            config,
        }))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(api::health))
        .route("/train", post(api::train))
        .route("/models/{id}", get(api::get_model))
        .route("/models/{id}/field", post(api::field))
        .route("/models/{id}/rollout", get(session::rollout))
        .with_state(state)
}

/// Binds `addr` and reports the bound address before serving.
pub async fn bind(addr: &str) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub async fn serve_with_shutdown(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
