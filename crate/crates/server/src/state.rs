use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;
use thiserror::Error;
use tokio::sync::Semaphore;

use rcg_core::analysis::{AnalysisLog, EvalReport};
use rcg_core::config::{ConfigError, ToolConfig};
use rcg_core::pipeline::{Engine, EngineError};
use rcg_core::prompt::{PromptCatalog, PromptError};

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

/// Counts requests admitted to generation, whether running or waiting.
pub struct Admission {
    in_system: Arc<AtomicUsize>,
    limit: usize,
}

/// Releases its admission slot on drop.
pub struct Ticket(Arc<AtomicUsize>);

impl Drop for Ticket {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Admission {
    pub fn new(queue_capacity: usize, max_concurrent: usize) -> Self {
        Admission {
            in_system: Arc::new(AtomicUsize::new(0)),
            limit: queue_capacity + max_concurrent,
        }
    }

    pub fn try_admit(&self) -> Option<Ticket> {
        let prev = self.in_system.fetch_add(1, Ordering::SeqCst);
        if prev >= self.limit {
            self.in_system.fetch_sub(1, Ordering::SeqCst);
            return None;
        }
        Some(Ticket(self.in_system.clone()))
    }

    pub fn in_system(&self) -> usize {
        self.in_system.load(Ordering::SeqCst)
    }

    pub fn limit(&self) -> usize {
        self.limit
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done { reports: Vec<EvalReport>, text: String },
    Failed { error: String },
}

pub struct ServerOptions {
    pub config_path: PathBuf,
    pub read_only: bool,
    pub ui_dir: Option<PathBuf>,
}

pub struct AppState {
    pub config_path: PathBuf,
    pub read_only: bool,
    pub ui_dir: Option<PathBuf>,
    engine: RwLock<Arc<Engine>>,
    catalog: RwLock<Arc<PromptCatalog>>,
    log: RwLock<Arc<AnalysisLog>>,
    pub admission: Admission,
    pub generation: Arc<Semaphore>,
    pub max_concurrent: usize,
    jobs: Mutex<BTreeMap<u64, JobStatus>>,
    next_job: AtomicU64,
    /// Serializes every operation that writes files or swaps state.
    pub write_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    /// Load config, catalog and knowledge bases. Nothing is written to disk.
    pub fn load(opts: ServerOptions) -> Result<Self, StartupError> {
        let config = ToolConfig::load(&opts.config_path)?;
        let catalog = PromptCatalog::load_or_default(&config.prompt_catalog_path())?;
        let log = AnalysisLog::open(config.analysis_log_path());
        let server = config.server.clone();
        let engine = Engine::from_config(config)?;
        Ok(AppState {
            config_path: opts.config_path,
            read_only: opts.read_only,
            ui_dir: opts.ui_dir,
            engine: RwLock::new(Arc::new(engine)),
            catalog: RwLock::new(Arc::new(catalog)),
            log: RwLock::new(Arc::new(log)),
            admission: Admission::new(server.queue_capacity, server.max_concurrent_generations),
            generation: Arc::new(Semaphore::new(server.max_concurrent_generations)),
            max_concurrent: server.max_concurrent_generations,
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            write_lock: tokio::sync::Mutex::new(()),
        })
    }

    pub fn engine(&self) -> Arc<Engine> {
        self.engine.read().expect("engine lock").clone()
    }

    pub fn catalog(&self) -> Arc<PromptCatalog> {
        self.catalog.read().expect("catalog lock").clone()
    }

    pub fn log(&self) -> Arc<AnalysisLog> {
        self.log.read().expect("log lock").clone()
    }

    pub fn config_dir(&self) -> PathBuf {
        self.config_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf()
    }

    /// Swap in a new engine; reopen the log if its path moved.
    pub fn install_engine(&self, engine: Engine) {
        let new_log = engine.config().analysis_log_path();
        if new_log != self.log().path() {
            *self.log.write().expect("log lock") = Arc::new(AnalysisLog::open(new_log));
        }
        *self.engine.write().expect("engine lock") = Arc::new(engine);
    }

    pub fn install_catalog(&self, catalog: PromptCatalog) {
        *self.catalog.write().expect("catalog lock") = Arc::new(catalog);
    }

    pub fn new_job(&self) -> u64 {
        let id = self.next_job.fetch_add(1, Ordering::SeqCst);
        self.jobs.lock().expect("jobs lock").insert(id, JobStatus::Running);
        id
    }

    pub fn set_job(&self, id: u64, status: JobStatus) {
        self.jobs.lock().expect("jobs lock").insert(id, status);
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.jobs.lock().expect("jobs lock").get(&id).cloned()
    }
}
