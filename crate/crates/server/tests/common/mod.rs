#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tokio::runtime::Runtime;
use tokio::sync::oneshot;

use rcg_core::config::ToolConfig;
use rcg_core::kb::build_kb;
use rcg_server::mock::{spawn_mock, MockHandle, MockOptions};
use rcg_server::{serve_listener, AppState, ServerOptions};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn runtime() -> Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap()
}

pub fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

pub fn mock(rt: &Runtime, opts: MockOptions) -> MockHandle {
    rt.block_on(spawn_mock(opts, local())).unwrap()
}

/// `[llm]` section for the in-process stub.
pub const STUB_LLM: &str = "[llm]\nkind = \"stub\"\n";

pub fn remote_llm(url: &str, timeout_ms: u64) -> String {
    format!("[llm]\nkind = \"remote\"\nendpoint_url = \"{url}\"\nmodel_name = \"mock\"\nrequest_timeout_ms = {timeout_ms}\nretries = 0\n")
}

/// Write a config with one knowledge base built from the sample corpus.
pub fn workspace(dir: &Path, llm: &str, server: &str) -> PathBuf {
    copy_dir(&fixtures().join("corpus"), &dir.join("corpus"));
    let text = format!(
        r#"prompt_catalog = "prompts.json"
analysis_log = "logs/analysis.jsonl"

[embedder]
kind = "test"
dim = 64

[splitter]
chunk_len = 24
overlap = 4

{llm}
[server]
{server}

[defaults]
kb_id = "corpus"
k = 3

[[kb]]
kb_id = "corpus"
name = "Corpus"
description = "memory company plants and manufacturing"
dir = "kb"
sources = ["corpus"]
"#
    );
    let path = dir.join("rcg.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = ToolConfig::load(&path).unwrap();
    let e = cfg.embedder.build().unwrap();
    let entry = &cfg.kbs[0];
    build_kb(&[dir.join("corpus")], &cfg.kb_dir(entry), &cfg.splitter, e.as_ref(), &cfg.index).unwrap();
    path
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
    }
}

pub fn start(rt: &Runtime, config_path: &Path, read_only: bool) -> Server {
    let state = Arc::new(
        AppState::load(ServerOptions {
            config_path: config_path.to_path_buf(),
            read_only,
            ui_dir: None,
        })
        .unwrap(),
    );
    let listener = rt.block_on(tokio::net::TcpListener::bind(local())).unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel::<()>();
    let st = state.clone();
    rt.spawn(async move {
        serve_listener(st, listener, async {
            let _ = rx.await;
        })
        .await
        .unwrap();
    });
    Server {
        base: format!("http://{addr}"),
        state,
        stop: Some(tx),
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

/// Returns (status, body text).
pub fn get(url: &str) -> (u16, String) {
    let mut r = agent().get(url).call().unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_to_string().unwrap())
}

pub fn send(method: &str, url: &str, body: &str) -> (u16, String) {
    let a = agent();
    let req = match method {
        "POST" => a.post(url),
        "PUT" => a.put(url),
        other => panic!("unsupported method {other}"),
    };
    let mut r = req.header("content-type", "application/json").send(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_to_string().unwrap())
}

pub fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

/// Split an SSE body into (event, data) pairs.
pub fn sse_events(body: &str) -> Vec<(String, String)> {
    body.split("\n\n")
        .filter_map(|block| {
            let mut event = String::from("message");
            let mut data = Vec::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    event = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push(v.strip_prefix(' ').unwrap_or(v).to_string());
                }
            }
            (!data.is_empty()).then(|| (event, data.join("\n")))
        })
        .collect()
}
