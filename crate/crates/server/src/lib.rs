//! HTTP service over the retrieval and generation engine.
//!
//! Chat turns stream as server-sent events. Generation goes through a bounded
//! FIFO queue; requests past its capacity get 429.

pub mod admin;
pub mod chat;
pub mod error;
pub mod mock;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use state::{AppState, ServerOptions, StartupError};

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(admin::health))
        .route("/capabilities", get(admin::capabilities))
        .route("/chat", post(chat::chat))
        .route("/prompts", get(admin::list_prompts).put(admin::replace_prompts))
        .route("/prompts/{name}", get(admin::get_prompt).put(admin::put_prompt))
        .route("/prompts/{name}/reset", post(admin::reset_prompt))
        .route("/config", get(admin::get_config).put(admin::put_config))
        .route("/kb", get(admin::list_kbs))
        .route("/kb/reindex", post(admin::reindex))
        .route("/analysis/log", get(admin::log_page))
        .route("/analysis/log/export", get(admin::log_export))
        .route("/analysis/eval", post(admin::start_eval))
        .route("/analysis/eval/{id}", get(admin::eval_status));
    let ui = state.ui_dir.clone();
    let app = api.with_state(state);
    match ui {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Bind `addr` and serve until `shutdown` resolves.
pub async fn serve_on(
    state: Arc<AppState>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), StartupError> {
    let listener = TcpListener::bind(addr).await.map_err(|source| StartupError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    serve_listener(state, listener, shutdown).await
}

pub async fn serve_listener(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), StartupError> {
    let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_default();
    tracing::info!(%addr, read_only = state.read_only, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|source| StartupError::Bind { addr, source })
}

/// Load the configuration and serve on its host and port until Ctrl-C.
pub async fn serve(opts: ServerOptions, port: Option<u16>) -> Result<(), StartupError> {
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::load(opts)).await.expect("load task")?);
    let settings = state.engine().config().server.clone();
    let host = settings.host.clone();
    let port = port.unwrap_or(settings.port);
    let addr: SocketAddr = format!("{host}:{port}").parse().map_err(|_| StartupError::Bind {
        addr: format!("{host}:{port}"),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "bad host"),
    })?;
    serve_on(state, addr, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
