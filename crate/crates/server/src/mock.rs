//! Scripted stand-ins for a completion endpoint and an embeddings endpoint.
//!
//! Used by the integration tests and by `rcg mock` for offline demos.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use rcg_core::embed::test_embed;
use rcg_core::llm::{stub_generate, StubMarkers};

#[derive(Debug, Clone)]
pub struct MockOptions {
    /// Fixed completion chunks; `None` answers like the in-process stub.
    pub chunks: Option<Vec<String>>,
    pub chunk_delay: Duration,
    /// Send response headers, then never send a byte of body.
    pub stall: bool,
    /// Non-200 status returned by the completion route.
    pub fail_status: Option<u16>,
    pub embed_dim: usize,
    /// Fixed embedding rows, cycled by input position.
    pub fixed_vectors: Option<Vec<Vec<f32>>>,
}

impl Default for MockOptions {
    fn default() -> Self {
        MockOptions {
            chunks: None,
            chunk_delay: Duration::ZERO,
            stall: false,
            fail_status: None,
            embed_dim: 64,
            fixed_vectors: None,
        }
    }
}

pub struct MockState {
    pub options: MockOptions,
    pub completion_requests: AtomicUsize,
    pub embedding_requests: AtomicUsize,
}

#[derive(Deserialize)]
struct CompletionBody {
    prompt: String,
    #[serde(default)]
    stream: bool,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    input: Vec<String>,
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if !c.is_whitespace() && cur.ends_with(char::is_whitespace) {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

async fn completions(State(st): State<Arc<MockState>>, Json(body): Json<CompletionBody>) -> Response {
    st.completion_requests.fetch_add(1, Ordering::SeqCst);
    let o = &st.options;
    if let Some(code) = o.fail_status {
        let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (status, "scripted failure").into_response();
    }
    let chunks = o
        .chunks
        .clone()
        .unwrap_or_else(|| words(&stub_generate(&body.prompt, &StubMarkers::default())));
    if !body.stream {
        if o.stall {
            tokio::time::sleep(Duration::from_secs(3600)).await;
        }
        return Json(json!({"choices": [{"text": chunks.concat(), "finish_reason": "stop"}]})).into_response();
    }
    let delay = o.chunk_delay;
    let stall = o.stall;
    let stream = async_stream(chunks, delay, stall);
    Sse::new(stream).into_response()
}

fn async_stream(
    chunks: Vec<String>,
    delay: Duration,
    stall: bool,
) -> impl tokio_stream::Stream<Item = Result<Event, Infallible>> {
    let (tx, rx) = tokio::sync::mpsc::channel(16);
    tokio::spawn(async move {
        if stall {
            tokio::time::sleep(Duration::from_secs(3600)).await;
            return;
        }
        let n = chunks.len();
        for (i, c) in chunks.into_iter().enumerate() {
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
            let finish = if i + 1 == n { json!("stop") } else { json!(null) };
            let data = json!({"choices": [{"text": c, "finish_reason": finish}]});
            if tx.send(Ok(Event::default().data(data.to_string()))).await.is_err() {
                return;
            }
        }
        let _ = tx.send(Ok(Event::default().data("[DONE]"))).await;
    });
    tokio_stream::wrappers::ReceiverStream::new(rx)
}

async fn embeddings(State(st): State<Arc<MockState>>, Json(body): Json<EmbeddingBody>) -> Response {
    st.embedding_requests.fetch_add(1, Ordering::SeqCst);
    let o = &st.options;
    // Reverse order on the wire so clients must sort by index.
    let data: Vec<_> = body
        .input
        .iter()
        .enumerate()
        .rev()
        .map(|(i, text)| {
            let v = match &o.fixed_vectors {
                Some(rows) if !rows.is_empty() => rows[i % rows.len()].clone(),
                _ => test_embed(text, o.embed_dim),
            };
            json!({"index": i, "embedding": v})
        })
        .collect();
    Json(json!({"data": data})).into_response()
}

pub fn mock_router(options: MockOptions) -> (Router, Arc<MockState>) {
    let state = Arc::new(MockState {
        options,
        completion_requests: AtomicUsize::new(0),
        embedding_requests: AtomicUsize::new(0),
    });
    let router = Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/embeddings", post(embeddings))
        .with_state(state.clone());
    (router, state)
}

/// A mock server running on the current tokio runtime.
pub struct MockHandle {
    pub addr: SocketAddr,
    pub state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockHandle {
    pub fn completions_url(&self) -> String {
        format!("http://{}/v1/completions", self.addr)
    }

    pub fn embeddings_url(&self) -> String {
        format!("http://{}/v1/embeddings", self.addr)
    }
}

impl Drop for MockHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn spawn_mock(options: MockOptions, addr: SocketAddr) -> std::io::Result<MockHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (router, state) = mock_router(options);
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(async move {
        let _ = axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(MockHandle {
        addr,
        state,
        shutdown: Some(tx),
    })
}
