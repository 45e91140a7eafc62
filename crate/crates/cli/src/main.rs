//! `rcg`: build knowledge bases, serve the API, run one-off queries and
//! evaluations.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or input, 3 upstream
//! embedder or LLM failure.

mod query;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rcg_core::analysis::{format_report, format_summary, load_dataset, parse_approaches, parse_sweep, Approach};
use rcg_core::config::{KbEntry, ToolConfig};
use rcg_core::kb::{build_kb, BuildError};
use rcg_core::pipeline::{Engine, EngineError};
use rcg_core::prompt::PromptCatalog;
use rcg_server::mock::{spawn_mock, MockOptions};
use rcg_server::{ServerOptions, StartupError};

#[derive(Parser)]
#[command(name = "rcg", version, about = "Retrieval-centric generation on private documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, embed and index documents into a knowledge-base directory.
    Prepare(PrepareArgs),
    /// Serve the HTTP API and, optionally, a static web UI.
    Serve(ServeArgs),
    /// Answer one query and print the retrieval trace and response.
    Query(query::QueryArgs),
    /// Score approaches with Rouge-L over a query/label dataset.
    Eval(EvalArgs),
    /// Run scripted completion and embedding endpoints for offline demos.
    Mock(MockArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Files or directories to ingest.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Output directory for the passage store and index.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Register (or update) this knowledge base in the config file.
    #[arg(long)]
    kb_id: Option<String>,
    #[arg(long, requires = "kb_id")]
    name: Option<String>,
    #[arg(long, requires = "kb_id")]
    description: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Reject every mutating route with 403.
    #[arg(long)]
    read_only: bool,
    /// Directory with the static web UI bundle.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Override the configured port.
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// JSONL file of {"query", "label"} pairs.
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated prompt-set names, e.g. rog,rag,rcg.
    #[arg(long, default_value = "rog,rag,rcg")]
    approaches: String,
    /// Add RCG-EPW-w reports for start:end:step, e.g. 10:90:10.
    #[arg(long)]
    epw_sweep: Option<String>,
    /// Print "-" instead of timings so reruns are byte-identical.
    #[arg(long)]
    omit_timing: bool,
    /// Also write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct MockArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8000)]
    port: u16,
    /// Fixed completion chunks, comma-separated; default answers like the stub.
    #[arg(long, value_delimiter = ',')]
    chunks: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Accept requests and never answer.
    #[arg(long)]
    stall: bool,
    #[arg(long)]
    fail_status: Option<u16>,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
}

/// A failure with its exit code.
pub enum Failure {
    Usage(String),
    Config(String),
    Upstream(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Upstream(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Upstream(m) => m,
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::BadRequest(m) => Failure::Usage(m),
            e @ EngineError::Budget(_) => Failure::Usage(e.to_string()),
            e @ EngineError::Upstream { .. } => Failure::Upstream(e.to_string()),
            EngineError::Config(m) => Failure::Config(m),
        }
    }
}

impl From<StartupError> for Failure {
    fn from(e: StartupError) -> Self {
        match e {
            StartupError::Engine(inner) => inner.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

pub type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let verbose = matches!(cli.command, Command::Serve(_) | Command::Mock(_));
    init_tracing(verbose);
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Serve(a) => serve(a),
        Command::Query(a) => query::run(a),
        Command::Eval(a) => eval(a),
        Command::Mock(a) => mock(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn init_tracing(verbose: bool) {
    let default = if verbose { "info" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn load_config(path: &Path) -> Result<ToolConfig, Failure> {
    ToolConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

pub fn load_catalog(cfg: &ToolConfig) -> Result<PromptCatalog, Failure> {
    PromptCatalog::load_or_default(&cfg.prompt_catalog_path()).map_err(|e| Failure::Config(e.to_string()))
}

fn prepare(a: PrepareArgs) -> CliResult {
    let mut cfg = load_config(&a.config)?;
    let embedder = cfg.embedder.build().map_err(|e| Failure::Config(e.to_string()))?;
    let report = build_kb(&a.input, &a.out, &cfg.splitter, embedder.as_ref(), &cfg.index).map_err(|e| match e {
        BuildError::Embed(e) => Failure::Upstream(e.to_string()),
        other => Failure::Config(other.to_string()),
    })?;
    println!("documents: {}", report.documents);
    println!("passages: {}", report.passages);
    println!("dim: {}", report.dim);
    println!("index: {}", report.index_kind);
    println!("skipped: {}", report.skipped.len());
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.path.display(), s.reason);
    }
    if report.replaced_sequences > 0 {
        eprintln!("warning: {} invalid UTF-8 sequences replaced", report.replaced_sequences);
    }
    println!("passage store: {}", report.passage_store.display());
    println!("index file: {}", report.index_path.display());

    if let Some(kb_id) = a.kb_id {
        let base = std::fs::canonicalize(cfg.base_dir()).unwrap_or_else(|_| cfg.base_dir().to_path_buf());
        let rel = |p: &Path| -> PathBuf {
            let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
            let abs = std::fs::canonicalize(&abs).unwrap_or(abs);
            abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs)
        };
        let entry = KbEntry {
            kb_id: kb_id.clone(),
            name: a.name.unwrap_or_else(|| kb_id.clone()),
            description: a.description.unwrap_or_default(),
            dir: rel(&a.out),
            passage_store: None,
            index: None,
            sources: a.input.iter().map(|p| rel(p)).collect(),
            embedder_model: None,
        };
        match cfg.kbs.iter_mut().find(|k| k.kb_id == kb_id) {
            Some(existing) => *existing = entry,
            None => cfg.kbs.push(entry),
        }
        cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
        cfg.save(&a.config).map_err(|e| Failure::Config(e.to_string()))?;
        println!("registered: {kb_id}");
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Config(format!("cannot start runtime: {e}")))
}

fn serve(a: ServeArgs) -> CliResult {
    let opts = ServerOptions {
        config_path: a.config,
        read_only: a.read_only,
        ui_dir: a.ui_dir,
    };
    runtime()?.block_on(rcg_server::serve(opts, a.port))?;
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let dataset = load_dataset(&a.dataset).map_err(|e| Failure::Config(e.to_string()))?;
    let mut approaches = parse_approaches(&a.approaches).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = &a.epw_sweep {
        let weights = parse_sweep(s).map_err(|e| Failure::Usage(e.to_string()))?;
        approaches.extend(weights.into_iter().map(Approach::epw));
    }
    let catalog = load_catalog(&cfg)?;
    for ap in &approaches {
        if catalog.get(&ap.prompt_set).is_none() {
            return Err(Failure::Usage(format!("unknown prompt set '{}'", ap.prompt_set)));
        }
    }
    let engine = Engine::from_config(cfg)?;
    let reports = engine.evaluate(&catalog, &dataset, &approaches);
    for r in &reports {
        print!("{}", format_report(r, a.omit_timing));
        println!();
    }
    let refs: Vec<_> = reports.iter().collect();
    print!("{}", format_summary(&refs, a.omit_timing));
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&reports).expect("reports serialize");
        std::fs::write(path, text + "\n").map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))?;
    }
    let failed = reports.iter().flat_map(|r| &r.rows).filter(|row| row.error.is_some()).count();
    if failed > 0 {
        return Err(Failure::Upstream(format!("{failed} answers failed")));
    }
    Ok(())
}

fn mock(a: MockArgs) -> CliResult {
    let addr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| Failure::Usage(format!("bad address {}:{}", a.host, a.port)))?;
    let opts = MockOptions {
        chunks: a.chunks,
        chunk_delay: std::time::Duration::from_millis(a.delay_ms),
        stall: a.stall,
        fail_status: a.fail_status,
        embed_dim: a.embed_dim,
        fixed_vectors: None,
    };
    runtime()?.block_on(async move {
        let handle = spawn_mock(opts, addr)
            .await
            .map_err(|e| Failure::Config(format!("cannot bind {addr}: {e}")))?;
        println!("completions: {}", handle.completions_url());
        println!("embeddings: {}", handle.embeddings_url());
        let _ = tokio::signal::ctrl_c().await;
        Ok(())
    })
}
