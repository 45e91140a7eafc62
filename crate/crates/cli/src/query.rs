//! `rcg query`: one turn, locally or against a running server.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;

use clap::Args;
use serde_json::{json, Value};

use rcg_core::llm::GenerationEvent;
use rcg_core::pipeline::{Engine, TurnPlan, TurnRequest};
use rcg_core::retrieval::RetrievalMode;

use crate::{load_catalog, load_config, CliResult, Failure};

#[derive(Args)]
pub struct QueryArgs {
    /// Required for local runs; ignored with --server.
    #[arg(long, required_unless_present = "server")]
    config: Option<PathBuf>,
    /// Prompt set: rcg, rag, rog or a custom name.
    #[arg(long)]
    approach: Option<String>,
    #[arg(long)]
    q: String,
    /// Percent of retrieved knowledge tokens to inject.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=100))]
    epw: Option<u8>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mode: Option<RetrievalMode>,
    #[arg(long)]
    kb: Option<String>,
    /// Base URL of a running server, e.g. http://127.0.0.1:7860.
    #[arg(long)]
    server: Option<String>,
}

struct Hit {
    passage_id: String,
    score: f64,
    text: String,
}

/// What gets printed before the response, from either source.
struct Trace {
    approach: String,
    mode: String,
    kb_id: Option<String>,
    epw_weight: u64,
    hits: Vec<Hit>,
    tokens_retrieved: u64,
    tokens_injected: u64,
}

impl Trace {
    fn from_plan(plan: &TurnPlan) -> Self {
        let r = plan.retrieval.as_ref();
        Trace {
            approach: plan.approach.clone(),
            mode: plan.retrieval_config.mode.to_string(),
            kb_id: r.map(|r| r.kb_id.clone()),
            epw_weight: plan.retrieval_config.epw_weight as u64,
            hits: r
                .map(|r| {
                    r.hits
                        .iter()
                        .map(|h| Hit {
                            passage_id: h.passage_id.clone(),
                            score: h.score as f64,
                            text: h.text.clone(),
                        })
                        .collect()
                })
                .unwrap_or_default(),
            tokens_retrieved: r.map_or(0, |r| r.tokens_retrieved as u64),
            tokens_injected: r.map_or(0, |r| r.tokens_injected as u64),
        }
    }

    fn from_json(v: &Value) -> Self {
        let s = |k: &str| v[k].as_str().unwrap_or_default().to_string();
        Trace {
            approach: s("approach"),
            mode: s("mode"),
            kb_id: v["kb_id"].as_str().map(str::to_string),
            epw_weight: v["epw_weight"].as_u64().unwrap_or(0),
            hits: v["hits"]
                .as_array()
                .map(|hs| {
                    hs.iter()
                        .map(|h| Hit {
                            passage_id: h["passage_id"].as_str().unwrap_or_default().to_string(),
                            score: h["score"].as_f64().unwrap_or(0.0),
                            text: h["text"].as_str().unwrap_or_default().to_string(),
                        })
                        .collect()
                })
                .unwrap_or_default(),
            tokens_retrieved: v["tokens_retrieved"].as_u64().unwrap_or(0),
            tokens_injected: v["tokens_injected"].as_u64().unwrap_or(0),
        }
    }

    fn print(&self) {
        println!("approach: {}", self.approach);
        println!("mode: {}", self.mode);
        println!("kb: {}", self.kb_id.as_deref().unwrap_or("-"));
        for (i, h) in self.hits.iter().enumerate() {
            println!("[{}] {:.4} {} {}", i + 1, h.score, h.passage_id, preview(&h.text, 72));
        }
        if self.kb_id.is_some() {
            println!(
                "tokens: retrieved {}, injected {} (epw {}%)",
                self.tokens_retrieved, self.tokens_injected, self.epw_weight
            );
        }
        println!("---");
    }
}

fn preview(text: &str, max: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    match flat.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &flat[..i]),
        None => flat,
    }
}

fn print_chunk(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

pub fn run(a: QueryArgs) -> CliResult {
    if a.q.trim().is_empty() {
        return Err(Failure::Usage("--q must not be empty".into()));
    }
    match a.server.clone() {
        Some(url) => remote(&url, a),
        None => local(a),
    }
}

fn local(a: QueryArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref().expect("clap requires config"))?;
    let catalog = load_catalog(&cfg)?;
    let engine = Engine::from_config(cfg)?;
    let req = TurnRequest {
        query: a.q,
        approach: a.approach,
        mode: a.mode,
        kb_id: a.kb,
        k: a.k,
        epw_weight: a.epw,
        ef_search: None,
    };
    let plan = engine.plan_turn(&catalog, &req)?;
    Trace::from_plan(&plan).print();
    engine.generate(&plan, &mut |ev| {
        if let GenerationEvent::TokenChunk { text } = ev {
            print_chunk(&text);
        }
    })
    .map_err(|e| {
        println!();
        Failure::from(rcg_core::pipeline::EngineError::from(e))
    })?;
    println!();
    Ok(())
}

fn remote(base: &str, a: QueryArgs) -> CliResult {
    let body = json!({
        "query": a.q,
        "approach": a.approach,
        "mode": a.mode,
        "kb_id": a.kb,
        "k": a.k,
        "epw_weight": a.epw,
        "stream": true,
    });
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let url = format!("{}/chat", base.trim_end_matches('/'));
    let resp = agent
        .post(&url)
        .send_json(&body)
        .map_err(|e| Failure::Upstream(format!("cannot reach {url}: {e}")))?;
    let status = resp.status().as_u16();
    if status != 200 {
        let text = resp.into_body().read_to_string().unwrap_or_default();
        let msg = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v["error"]["message"].as_str().map(str::to_string))
            .unwrap_or(text);
        return Err(match status {
            400 | 404 | 422 => Failure::Usage(msg),
            429 | 502 | 503 => Failure::Upstream(msg),
            _ => Failure::Config(format!("server answered {status}: {msg}")),
        });
    }
    let reader = BufReader::new(resp.into_body().into_reader());
    let mut event = String::new();
    let mut data = String::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Failure::Upstream(format!("stream broke: {e}")))?;
        if let Some(v) = line.strip_prefix("event:") {
            event = v.trim().to_string();
        } else if let Some(v) = line.strip_prefix("data:") {
            if !data.is_empty() {
                data.push('\n');
            }
            data.push_str(v.strip_prefix(' ').unwrap_or(v));
        } else if line.is_empty() && !data.is_empty() {
            let v: Value = serde_json::from_str(&data).map_err(|e| Failure::Upstream(format!("bad event: {e}")))?;
            match event.as_str() {
                "retrieval" => Trace::from_json(&v).print(),
                "token" => print_chunk(v["text"].as_str().unwrap_or_default()),
                "done" => {
                    println!();
                    return Ok(());
                }
                "error" => {
                    println!();
                    return Err(Failure::Upstream(format!(
                        "{}: {}",
                        v["code"].as_str().unwrap_or("error"),
                        v["message"].as_str().unwrap_or_default()
                    )));
                }
                _ => {}
            }
            event.clear();
            data.clear();
        }
    }
    Err(Failure::Upstream("stream ended without a done event".into()))
}
