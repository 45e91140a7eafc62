//! `POST /chat`: plan in the handler, generate behind the admission queue.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc;
use tokio_stream::StreamExt;

use rcg_core::llm::GenerationEvent;
use rcg_core::pipeline::{TurnPlan, TurnRequest};
use rcg_core::retrieval::RetrievalMode;

use crate::error::ApiError;
use crate::state::{AppState, Ticket};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub query: String,
    #[serde(default)]
    pub mode: Option<RetrievalMode>,
    #[serde(default)]
    pub approach: Option<String>,
    #[serde(default)]
    pub kb_id: Option<String>,
    #[serde(default)]
    pub k: Option<u64>,
    #[serde(default)]
    pub epw_weight: Option<i64>,
    #[serde(default)]
    pub ef_search: Option<u64>,
    #[serde(default = "yes")]
    pub stream: bool,
}

fn yes() -> bool {
    true
}

impl ChatRequest {
    fn into_turn(self) -> Result<(TurnRequest, bool), ApiError> {
        let epw_weight = match self.epw_weight {
            None => None,
            Some(w) if (0..=100).contains(&w) => Some(w as u8),
            Some(w) => return Err(ApiError::bad_request(format!("epw_weight must be within 0..=100, got {w}"))),
        };
        let turn = TurnRequest {
            query: self.query,
            approach: self.approach,
            mode: self.mode,
            kb_id: self.kb_id,
            k: self.k.map(|k| k as usize),
            epw_weight,
            ef_search: self.ef_search.map(|e| e as usize),
        };
        Ok((turn, self.stream))
    }
}

/// Messages from the generation task to the response writer.
enum Out {
    Retrieval(Value),
    Token(String),
    Done(Value),
    Error(ApiError),
}

impl Out {
    fn event(self) -> Event {
        let (name, data) = match self {
            Out::Retrieval(v) => ("retrieval", v),
            Out::Token(t) => ("token", json!({ "text": t })),
            Out::Done(v) => ("done", v),
            Out::Error(e) => ("error", e.body()),
        };
        Event::default().event(name).data(data.to_string())
    }
}

fn retrieval_payload(plan: &TurnPlan) -> Value {
    let r = plan.retrieval.as_ref();
    json!({
        "approach": plan.approach,
        "mode": plan.retrieval_config.mode,
        "kb_id": r.map(|r| r.kb_id.clone()),
        "k": plan.retrieval_config.k,
        "epw_weight": plan.retrieval_config.epw_weight,
        "hits": r.map(|r| r.hits.iter().map(|h| json!({
            "passage_id": h.passage_id,
            "doc_id": h.doc_id,
            "rank": h.rank,
            "score": h.score,
            "text": h.text,
        })).collect::<Vec<_>>()).unwrap_or_default(),
        "tokens_retrieved": r.map_or(0, |r| r.tokens_retrieved),
        "tokens_injected": r.map_or(0, |r| r.tokens_injected),
        "prompt_tokens_est": plan.prompt_tokens_est,
    })
}

pub async fn chat(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: ChatRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid chat request: {e}")))?;
    let (turn, stream) = req.into_turn()?;
    let engine = state.engine();
    let catalog = state.catalog();
    let plan = {
        let engine = engine.clone();
        tokio::task::spawn_blocking(move || engine.plan_turn(&catalog, &turn))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??
    };
    let ticket = state.admission.try_admit().ok_or_else(ApiError::queue_full)?;

    // Join the FIFO line for a generation slot now, so admission order is
    // service order.
    let queued_at = Instant::now();
    let mut acquire = Box::pin(state.generation.clone().acquire_owned());
    let ready = tokio::time::timeout(Duration::ZERO, &mut acquire).await.ok();

    let (tx, rx) = mpsc::channel::<Out>(64);
    let _ = tx.send(Out::Retrieval(retrieval_payload(&plan))).await;
    let st = state.clone();
    tokio::spawn(async move {
        let permit = match ready {
            Some(p) => p,
            None => acquire.await,
        }
        .expect("semaphore is never closed");
        let queue_ms = queued_at.elapsed().as_millis() as u64;
        let log = st.log();
        let task = tokio::task::spawn_blocking(move || generate(engine, plan, tx, log, queue_ms, ticket, permit));
        if let Err(e) = task.await {
            tracing::error!(error = %e, "generation task failed");
        }
    });

    if stream {
        let events = tokio_stream::wrappers::ReceiverStream::new(rx).map(|o| Ok::<_, Infallible>(o.event()));
        return Ok(Sse::new(events).keep_alive(KeepAlive::default()).into_response());
    }
    collect(rx).await
}

fn generate(
    engine: Arc<rcg_core::pipeline::Engine>,
    plan: TurnPlan,
    tx: mpsc::Sender<Out>,
    log: Arc<rcg_core::analysis::AnalysisLog>,
    queue_ms: u64,
    ticket: Ticket,
    permit: tokio::sync::OwnedSemaphorePermit,
) {
    let started = Instant::now();
    let result = engine.generate(&plan, &mut |ev| {
        if let GenerationEvent::TokenChunk { text } = ev {
            let _ = tx.blocking_send(Out::Token(text));
        }
    });
    let generate_ms = started.elapsed().as_millis() as u64;
    let last = match result {
        Ok(c) => {
            let record = engine.record(&plan, &c.text, generate_ms, None);
            let latency = record.latency_ms;
            let logged = match log.append(record) {
                Ok(()) => true,
                Err(e) => {
                    tracing::warn!(error = %e, "turn not logged");
                    false
                }
            };
            Out::Done(json!({
                "response": c.text,
                "finish_reason": c.finish_reason,
                "usage": c.usage,
                "latency_ms": {
                    "retrieve": latency.retrieve,
                    "generate": latency.generate,
                    "total": latency.total,
                    "queue": queue_ms,
                },
                "logged": logged,
            }))
        }
        Err(e) => {
            let record = engine.record(&plan, "", generate_ms, Some(e.to_string()));
            if let Err(le) = log.append(record) {
                tracing::warn!(error = %le, "failed turn not logged");
            }
            Out::Error(rcg_core::pipeline::EngineError::from(e).into())
        }
    };
    // Free the slot before the client hears the end of the turn.
    drop(permit);
    drop(ticket);
    let _ = tx.blocking_send(last);
}

/// Non-streaming form: wait for the end and answer with one JSON body.
async fn collect(mut rx: mpsc::Receiver<Out>) -> Result<Response, ApiError> {
    let mut retrieval = Value::Null;
    let mut text = String::new();
    while let Some(o) = rx.recv().await {
        match o {
            Out::Retrieval(v) => retrieval = v,
            Out::Token(t) => text.push_str(&t),
            Out::Done(mut v) => {
                v["retrieval"] = retrieval;
                debug_assert_eq!(v["response"].as_str(), Some(text.as_str()));
                return Ok(Json(v).into_response());
            }
            Out::Error(e) => return Err(e),
        }
    }
    Err(ApiError::internal("generation ended without a result"))
}
