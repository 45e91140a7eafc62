//! The single TOML configuration file shared by the CLI and the server.
//!
//! Relative paths inside the file resolve against the file's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbedderSpec;
use crate::index::{HnswParams, IndexKind};
use crate::ingest::SplitterConfig;
use crate::llm::LlmSpec;
use crate::retrieval::RetrievalMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexSpec {
    pub kind: IndexKind,
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for IndexSpec {
    fn default() -> Self {
        IndexSpec {
            kind: IndexKind::Hnsw,
            m: 16,
            ef_construction: 200,
            seed: 42,
        }
    }
}

impl IndexSpec {
    pub fn hnsw_params(&self) -> HnswParams {
        HnswParams::new(self.m, self.ef_construction, self.seed)
    }
}

/// One registered knowledge base. Files live in `dir` unless overridden.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbEntry {
    pub kb_id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage_store: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    /// Inputs used by reindexing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<PathBuf>,
    /// When set, must equal the global embedder's model name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_model: Option<String>,
}

pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const INDEX_FILE: &str = "index.rcgx";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSettings {
    pub host: String,
    pub port: u16,
    pub queue_capacity: usize,
    pub max_concurrent_generations: usize,
}

impl Default for ServerSettings {
    fn default() -> Self {
        ServerSettings {
            host: "127.0.0.1".into(),
            port: 7860,
            queue_capacity: 32,
            max_concurrent_generations: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Defaults {
    pub mode: RetrievalMode,
    pub approach: String,
    pub kb_id: Option<String>,
    pub k: usize,
    pub epw_weight: u8,
    pub ef_search: usize,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            mode: RetrievalMode::Manual,
            approach: "rcg".into(),
            kb_id: None,
            k: 5,
            epw_weight: 100,
            ef_search: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub llm: LlmSpec,
    #[serde(default)]
    pub splitter: SplitterConfig,
    #[serde(default)]
    pub index: IndexSpec,
    #[serde(default = "default_catalog")]
    pub prompt_catalog: PathBuf,
    #[serde(default = "default_log")]
    pub analysis_log: PathBuf,
    #[serde(default)]
    pub server: ServerSettings,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default, rename = "kb")]
    pub kbs: Vec<KbEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_catalog() -> PathBuf {
    PathBuf::from("prompts.json")
}

fn default_log() -> PathBuf {
    PathBuf::from("logs/analysis.jsonl")
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            embedder: EmbedderSpec::default(),
            llm: LlmSpec::default(),
            splitter: SplitterConfig::default(),
            index: IndexSpec::default(),
            prompt_catalog: default_catalog(),
            analysis_log: default_log(),
            server: ServerSettings::default(),
            defaults: Defaults::default(),
            kbs: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl ToolConfig {
    /// Parse and validate; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ToolConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        ToolConfig::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write to `path` via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let io = |source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_toml()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn kb(&self, kb_id: &str) -> Option<&KbEntry> {
        self.kbs.iter().find(|k| k.kb_id == kb_id)
    }

    pub fn kb_dir(&self, kb: &KbEntry) -> PathBuf {
        self.resolve(&kb.dir)
    }

    pub fn passage_store_path(&self, kb: &KbEntry) -> PathBuf {
        match &kb.passage_store {
            Some(p) => self.resolve(p),
            None => self.kb_dir(kb).join(PASSAGES_FILE),
        }
    }

    pub fn index_path(&self, kb: &KbEntry) -> PathBuf {
        match &kb.index {
            Some(p) => self.resolve(p),
            None => self.kb_dir(kb).join(INDEX_FILE),
        }
    }

    pub fn prompt_catalog_path(&self) -> PathBuf {
        self.resolve(&self.prompt_catalog)
    }

    pub fn analysis_log_path(&self) -> PathBuf {
        self.resolve(&self.analysis_log)
    }

    /// Static checks that need no files on disk.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.embedder.validate() {
            return invalid(format!("embedder: {e}"));
        }
        if let Err(e) = self.llm.validate() {
            return invalid(format!("llm: {e}"));
        }
        if let Err(e) = self.splitter.validate() {
            return invalid(format!("splitter: {e}"));
        }
        if self.index.kind == IndexKind::Hnsw {
            if let Err(e) = self.index.hnsw_params().validate() {
                return invalid(format!("index: {e}"));
            }
        }
        if self.server.max_concurrent_generations == 0 {
            return invalid("server.max_concurrent_generations must be at least 1".into());
        }
        let d = &self.defaults;
        if d.k == 0 || d.ef_search == 0 {
            return invalid("defaults.k and defaults.ef_search must be positive".into());
        }
        if d.epw_weight > 100 {
            return invalid(format!("defaults.epw_weight must be within 0..=100, got {}", d.epw_weight));
        }
        let mut ids = BTreeSet::new();
        for kb in &self.kbs {
            if kb.kb_id.trim().is_empty() {
                return invalid("kb_id must not be empty".into());
            }
            if !ids.insert(kb.kb_id.as_str()) {
                return invalid(format!("duplicate kb_id '{}'", kb.kb_id));
            }
            if let Some(m) = &kb.embedder_model {
                if *m != self.embedder.model_name {
                    return invalid(format!(
                        "kb '{}' expects embedder '{m}' but the configured embedder is '{}'",
                        kb.kb_id, self.embedder.model_name
                    ));
                }
            }
        }
        if let Some(id) = &d.kb_id {
            if !ids.contains(id.as_str()) {
                return invalid(format!("defaults.kb_id '{id}' is not a registered knowledge base"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
prompt_catalog = "prompts.json"

[embedder]
kind = "test"
dim = 32

[llm]
kind = "stub"

[defaults]
kb_id = "kb1"
epw_weight = 50

[[kb]]
kb_id = "kb1"
name = "Company"
description = "company financial reports"
dir = "kb/kb1"
"#;

    #[test]
    fn parse_and_resolve() {
        let cfg = ToolConfig::from_toml(SAMPLE, Path::new("/etc/rcg")).unwrap();
        assert_eq!(cfg.embedder.dim, 32);
        assert_eq!(cfg.defaults.epw_weight, 50);
        let kb = cfg.kb("kb1").unwrap();
        assert_eq!(cfg.index_path(kb), Path::new("/etc/rcg/kb/kb1/index.rcgx"));
        assert_eq!(cfg.prompt_catalog_path(), Path::new("/etc/rcg/prompts.json"));
    }

    #[test]
    fn round_trip() {
        let cfg = ToolConfig::from_toml(SAMPLE, Path::new("/x")).unwrap();
        let back = ToolConfig::from_toml(&cfg.to_toml(), Path::new("/x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for (from, to) in [
            ("dim = 32", "dim = 0"),
            ("epw_weight = 50", "epw_weight = 150"),
            ("kb_id = \"kb1\"\nepw", "kb_id = \"nope\"\nepw"),
            ("kind = \"stub\"", "kind = \"stub\"\ntemperature = -1.0"),
        ] {
            let text = SAMPLE.replacen(from, to, 1);
            assert!(ToolConfig::from_toml(&text, Path::new(".")).is_err(), "{to}");
        }
        assert!(matches!(
            ToolConfig::from_toml("bogus = 1", Path::new(".")),
            Err(ConfigError::Parse(_))
        ));
    }
}
