//! Read and update routes: capabilities, prompts, config, knowledge bases,
//! analysis log and evaluation jobs.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Deserialize;
use serde_json::{json, Value};

use rcg_core::analysis::{
    format_report, format_summary, load_dataset, parse_approaches, parse_sweep, Approach, EvalPair, EvalReport,
};
use rcg_core::config::ToolConfig;
use rcg_core::kb::build_kb;
use rcg_core::pipeline::Engine;
use rcg_core::prompt::{PromptCatalog, PromptSet};

use crate::error::ApiError;
use crate::state::{AppState, JobStatus};

type ApiResult<T> = Result<T, ApiError>;

fn writable(state: &AppState) -> ApiResult<()> {
    if state.read_only {
        Err(ApiError::read_only())
    } else {
        Ok(())
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8], what: &str) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid {what}: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}

pub async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub async fn capabilities(State(state): State<Arc<AppState>>) -> Json<Value> {
    let engine = state.engine();
    let cfg = engine.config();
    let catalog = state.catalog();
    Json(json!({
        "read_only": state.read_only,
        "modes": ["off", "manual", "mokb"],
        "approaches": catalog.names().collect::<Vec<_>>(),
        "knowledge_bases": engine.knowledge_bases().iter().map(|kb| json!({
            "kb_id": kb.kb_id,
            "name": kb.name,
            "description": kb.description,
        })).collect::<Vec<_>>(),
        "defaults": cfg.defaults,
        "llm": { "kind": cfg.llm.kind, "model_name": cfg.llm.model_name, "context_budget": cfg.llm.context_budget },
        "embedder": { "kind": cfg.embedder.kind, "model_name": cfg.embedder.model_name, "dim": cfg.embedder.dim },
        "limits": {
            "epw_weight": [0, 100],
            "queue_capacity": cfg.server.queue_capacity,
            "max_concurrent_generations": state.max_concurrent,
            "in_system": state.admission.in_system(),
        },
    }))
}

// ---- prompts ----

fn catalog_json(catalog: &PromptCatalog) -> Value {
    serde_json::from_str(&catalog.to_text()).expect("catalog is JSON")
}

async fn save_catalog(state: &AppState, catalog: PromptCatalog) -> ApiResult<()> {
    let path = state.engine().config().prompt_catalog_path();
    let c = catalog.clone();
    blocking(move || c.save(&path))
        .await?
        .map_err(|e| ApiError::internal(format!("cannot save prompt catalog: {e}")))?;
    state.install_catalog(catalog);
    Ok(())
}

pub async fn list_prompts(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(catalog_json(&state.catalog()))
}

pub async fn replace_prompts(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    writable(&state)?;
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("catalog must be UTF-8"))?;
    let catalog = PromptCatalog::from_text(text).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let _guard = state.write_lock.lock().await;
    save_catalog(&state, catalog.clone()).await?;
    Ok(Json(catalog_json(&catalog)))
}

pub async fn get_prompt(State(state): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Json<PromptSet>> {
    state
        .catalog()
        .get(&name)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown prompt set '{name}'")))
}

pub async fn put_prompt(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
    body: Bytes,
) -> ApiResult<Json<PromptSet>> {
    writable(&state)?;
    if name.trim().is_empty() {
        return Err(ApiError::bad_request("prompt set name must not be empty"));
    }
    let set: PromptSet = parse_json(&body, "prompt set")?;
    let _guard = state.write_lock.lock().await;
    let mut catalog = (*state.catalog()).clone();
    catalog.insert(name, set.clone());
    save_catalog(&state, catalog).await?;
    Ok(Json(set))
}

pub async fn reset_prompt(State(state): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Json<PromptSet>> {
    writable(&state)?;
    let _guard = state.write_lock.lock().await;
    let mut catalog = (*state.catalog()).clone();
    catalog
        .reset(&name)
        .map_err(|_| ApiError::not_found(format!("'{name}' has no shipped default")))?;
    let set = catalog.get(&name).cloned().expect("just reset");
    save_catalog(&state, catalog).await?;
    Ok(Json(set))
}

// ---- config ----

pub async fn get_config(State(state): State<Arc<AppState>>) -> Json<ToolConfig> {
    Json(state.engine().config().clone())
}

/// Replace the whole configuration. The new engine is opened before anything
/// is written; on any failure the running state and the file are unchanged.
pub async fn put_config(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    writable(&state)?;
    let mut cfg: ToolConfig = parse_json(&body, "config")?;
    cfg.set_base_dir(state.config_dir());
    cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let _guard = state.write_lock.lock().await;
    let old = state.engine().config().clone();
    let restart_required = cfg.server != old.server;
    let catalog_moved = cfg.prompt_catalog_path() != old.prompt_catalog_path();

    let config_path = state.config_path.clone();
    let (engine, catalog) = blocking(move || -> ApiResult<(Engine, Option<PromptCatalog>)> {
        let catalog = if catalog_moved {
            Some(
                PromptCatalog::load_or_default(&cfg.prompt_catalog_path())
                    .map_err(|e| ApiError::bad_request(format!("prompt catalog: {e}")))?,
            )
        } else {
            None
        };
        let engine = Engine::from_config(cfg).map_err(|e| match e {
            rcg_core::pipeline::EngineError::Config(m) => ApiError::bad_request(m),
            other => other.into(),
        })?;
        engine
            .config()
            .save(&config_path)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok((engine, catalog))
    })
    .await??;
    let view = serde_json::to_value(engine.config()).expect("config serializes");
    state.install_engine(engine);
    if let Some(c) = catalog {
        state.install_catalog(c);
    }
    Ok(Json(json!({ "config": view, "restart_required": restart_required })))
}

// ---- knowledge bases ----

pub async fn list_kbs(State(state): State<Arc<AppState>>) -> Json<Value> {
    let engine = state.engine();
    let cfg = engine.config();
    let kbs: Vec<Value> = engine
        .knowledge_bases()
        .iter()
        .map(|kb| {
            let entry = cfg.kb(&kb.kb_id);
            json!({
                "kb_id": kb.kb_id,
                "name": kb.name,
                "description": kb.description,
                "passages": kb.len(),
                "dim": kb.index().dim(),
                "index_kind": kb.index().kind(),
                "reindexable": entry.is_some_and(|e| !e.sources.is_empty()
                    && e.passage_store.is_none() && e.index.is_none()),
            })
        })
        .collect();
    Json(json!({ "knowledge_bases": kbs }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReindexBody {
    kb_id: String,
}

/// Rebuild one knowledge base from its configured sources into a sibling
/// directory, swap it in, then reopen the engine. Failure restores the old files.
pub async fn reindex(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    writable(&state)?;
    let req: ReindexBody = parse_json(&body, "reindex request")?;
    let _guard = state.write_lock.lock().await;
    let cfg = state.engine().config().clone();
    let entry = cfg
        .kb(&req.kb_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown knowledge base '{}'", req.kb_id)))?;
    if entry.sources.is_empty() {
        return Err(ApiError::bad_request(format!("knowledge base '{}' has no sources", entry.kb_id)));
    }
    if entry.passage_store.is_some() || entry.index.is_some() {
        return Err(ApiError::bad_request("reindex needs the default file layout inside dir"));
    }
    let (engine, report) = blocking(move || -> ApiResult<(Engine, Value)> {
        let dir = cfg.kb_dir(&entry);
        let staging = sibling(&dir, "reindex");
        let backup = sibling(&dir, "previous");
        let _ = std::fs::remove_dir_all(&staging);
        let embedder = cfg
            .embedder
            .build()
            .map_err(|e| ApiError::bad_request(format!("embedder: {e}")))?;
        let sources: Vec<PathBuf> = entry.sources.iter().map(|p| cfg.resolve(p)).collect();
        let report = build_kb(&sources, &staging, &cfg.splitter, embedder.as_ref(), &cfg.index).map_err(|e| {
            let _ = std::fs::remove_dir_all(&staging);
            ApiError::bad_request(format!("build failed: {e}"))
        })?;
        let _ = std::fs::remove_dir_all(&backup);
        let had_old = dir.exists();
        let io = |e: std::io::Error| ApiError::internal(format!("cannot swap directories: {e}"));
        if had_old {
            std::fs::rename(&dir, &backup).map_err(io)?;
        }
        std::fs::rename(&staging, &dir).map_err(io)?;
        match Engine::from_config(cfg) {
            Ok(engine) => {
                let _ = std::fs::remove_dir_all(&backup);
                let summary = json!({
                    "kb_id": entry.kb_id,
                    "documents": report.documents,
                    "passages": report.passages,
                    "dim": report.dim,
                    "index_kind": report.index_kind,
                    "skipped": report.skipped.len(),
                });
                Ok((engine, summary))
            }
            Err(e) => {
                let _ = std::fs::remove_dir_all(&dir);
                if had_old {
                    let _ = std::fs::rename(&backup, &dir);
                }
                Err(e.into())
            }
        }
    })
    .await??;
    state.install_engine(engine);
    Ok(Json(report))
}

fn sibling(dir: &std::path::Path, tag: &str) -> PathBuf {
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{tag}"));
    dir.with_file_name(name)
}

// ---- analysis ----

#[derive(Deserialize)]
pub struct Page {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    50
}

pub async fn log_page(State(state): State<Arc<AppState>>, Query(page): Query<Page>) -> ApiResult<Json<Value>> {
    let log = state.log();
    let limit = page.limit.min(1000);
    let (records, total) = blocking(move || log.read_page(page.offset, limit))
        .await?
        .map_err(|e| ApiError::internal(format!("cannot read analysis log: {e}")))?;
    Ok(Json(json!({ "offset": page.offset, "limit": limit, "total": total, "records": records })))
}

pub async fn log_export(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let log = state.log();
    let bytes = blocking(move || -> std::io::Result<Vec<u8>> {
        let tmp = std::env::temp_dir().join(format!(
            "rcg-export-{}-{}.jsonl",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        ));
        log.export(&tmp)?;
        let bytes = std::fs::read(&tmp);
        let _ = std::fs::remove_file(&tmp);
        bytes
    })
    .await?
    .map_err(|e| ApiError::internal(format!("cannot export analysis log: {e}")))?;
    Ok((
        StatusCode::OK,
        [
            (header::CONTENT_TYPE, "application/x-ndjson"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"analysis.jsonl\""),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalBody {
    /// JSONL file, relative to the config directory.
    #[serde(default)]
    dataset: Option<PathBuf>,
    /// Inline pairs, used when no dataset file is given.
    #[serde(default)]
    pairs: Option<Vec<EvalPair>>,
    #[serde(default = "default_approaches")]
    approaches: String,
    #[serde(default)]
    epw_sweep: Option<String>,
    #[serde(default)]
    omit_timing: bool,
}

fn default_approaches() -> String {
    "rog,rag,rcg".into()
}

/// Start an evaluation job. Each answer waits for a generation slot, so jobs
/// share the model fairly with chat traffic.
pub async fn start_eval(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    writable(&state)?;
    let req: EvalBody = parse_json(&body, "eval request")?;
    let dataset = match (&req.dataset, req.pairs) {
        (Some(p), _) => {
            let path = state.engine().config().resolve(p);
            blocking(move || load_dataset(&path))
                .await?
                .map_err(|e| ApiError::bad_request(e.to_string()))?
        }
        (None, Some(pairs)) if !pairs.is_empty() => pairs,
        _ => return Err(ApiError::bad_request("give a dataset path or a nonempty pairs list")),
    };
    let mut approaches = if req.approaches.trim().is_empty() {
        Vec::new()
    } else {
        parse_approaches(&req.approaches).map_err(|e| ApiError::bad_request(e.to_string()))?
    };
    if let Some(s) = &req.epw_sweep {
        let weights = parse_sweep(s).map_err(|e| ApiError::bad_request(e.to_string()))?;
        approaches.extend(weights.into_iter().map(Approach::epw));
    }
    if approaches.is_empty() {
        return Err(ApiError::bad_request("no approaches to evaluate"));
    }
    let catalog = state.catalog();
    for a in &approaches {
        if catalog.get(&a.prompt_set).is_none() {
            return Err(ApiError::bad_request(format!("unknown prompt set '{}'", a.prompt_set)));
        }
    }

    let id = state.new_job();
    let st = state.clone();
    let omit_timing = req.omit_timing;
    let handle = tokio::runtime::Handle::current();
    tokio::task::spawn_blocking(move || {
        let engine = st.engine();
        let sem = st.generation.clone();
        let reports = rcg_core::analysis::run_eval(&dataset, &approaches, &mut |approach, query| {
            let _permit = handle.block_on(sem.clone().acquire_owned()).map_err(|e| e.to_string())?;
            engine
                .answer(&catalog, &Engine::eval_request(approach, query), &mut |_| {})
                .map(|o| o.completion.text)
                .map_err(|e| e.to_string())
        });
        st.set_job(id, finished(reports, omit_timing));
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id, "status": "running" }))).into_response())
}

fn finished(reports: Vec<EvalReport>, omit_timing: bool) -> JobStatus {
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format_report(r, omit_timing));
    }
    let refs: Vec<&EvalReport> = reports.iter().collect();
    text.push_str(&format_summary(&refs, omit_timing));
    JobStatus::Done { reports, text }
}

pub async fn eval_status(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    let job = state
        .job(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown eval job {id}")))?;
    let mut v = serde_json::to_value(job).expect("job serializes");
    v["job_id"] = json!(id);
    Ok(Json(v))
}
