//! Knowledge-base selection (manual or by description similarity), top-k
//! passage retrieval, and explicit prompt-weighting of the retrieved text.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, embed_one, EmbedError, Embedder};
use crate::index::{load_index, IndexError, VectorIndex};
use crate::ingest::{IngestError, PassageStore};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown knowledge base '{0}'")]
    UnknownKb(String),
    #[error("no knowledge bases are registered")]
    NoKnowledgeBases,
    #[error("knowledge base '{0}' has no description, required for automatic selection")]
    MissingDescription(String),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("knowledge base '{kb}' is inconsistent: {message}")]
    Inconsistent { kb: String, message: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Off,
    #[default]
    Manual,
    Mokb,
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(RetrievalMode::Off),
            "manual" => Ok(RetrievalMode::Manual),
            "mokb" => Ok(RetrievalMode::Mokb),
            other => Err(format!("unknown retrieval mode '{other}'")),
        }
    }
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RetrievalMode::Off => "off",
            RetrievalMode::Manual => "manual",
            RetrievalMode::Mokb => "mokb",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    pub selected_kb: Option<String>,
    pub k: usize,
    /// Percent of retrieved knowledge tokens injected into the prompt.
    pub epw_weight: u8,
    pub ef_search: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            mode: RetrievalMode::Manual,
            selected_kb: None,
            k: 5,
            epw_weight: 100,
            ef_search: 128,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::InvalidConfig("k must be at least 1".into()));
        }
        if self.epw_weight > 100 {
            return Err(RetrievalError::InvalidConfig(format!(
                "epw_weight must be within 0..=100, got {}",
                self.epw_weight
            )));
        }
        if self.ef_search == 0 {
            return Err(RetrievalError::InvalidConfig("ef_search must be positive".into()));
        }
        if self.mode == RetrievalMode::Manual && self.selected_kb.is_none() {
            return Err(RetrievalError::InvalidConfig("manual mode needs a selected knowledge base".into()));
        }
        Ok(())
    }
}

/// Passage store + vector index + functional description.
#[derive(Debug)]
pub struct KnowledgeBase {
    pub kb_id: String,
    pub name: String,
    pub description: String,
    store: PassageStore,
    index: VectorIndex,
    description_vec: Option<Vec<f32>>,
}

impl KnowledgeBase {
    pub fn new(
        kb_id: impl Into<String>,
        name: impl Into<String>,
        description: impl Into<String>,
        store: PassageStore,
        index: VectorIndex,
        embedder: &dyn Embedder,
    ) -> Result<Self, RetrievalError> {
        let kb_id = kb_id.into();
        let description = description.into();
        let inconsistent = |message: String| RetrievalError::Inconsistent {
            kb: kb_id.clone(),
            message,
        };
        if index.count() != store.len() {
            return Err(inconsistent(format!(
                "index has {} rows but the passage store has {} records",
                index.count(),
                store.len()
            )));
        }
        if index.dim() != embedder.spec().dim {
            return Err(inconsistent(format!(
                "index dimension {} differs from embedder dimension {}",
                index.dim(),
                embedder.spec().dim
            )));
        }
        let description_vec = if description.trim().is_empty() {
            None
        } else {
            Some(embed_one(embedder, &description)?)
        };
        Ok(KnowledgeBase {
            kb_id,
            name: name.into(),
            description,
            store,
            index,
            description_vec,
        })
    }

    /// Open the on-disk passage store and index; the index must have been
    /// built with the embedder's model.
    pub fn open(
        kb_id: &str,
        name: &str,
        description: &str,
        passage_store: &Path,
        index_path: &Path,
        embedder: &dyn Embedder,
    ) -> Result<Self, RetrievalError> {
        let store = PassageStore::open(passage_store)?;
        let index = load_index(index_path, Some(&embedder.spec().model_name))?;
        KnowledgeBase::new(kb_id, name, description, store, index, embedder)
    }

    pub fn store(&self) -> &PassageStore {
        &self.store
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn description_vec(&self) -> Option<&[f32]> {
        self.description_vec.as_deref()
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub passage_id: String,
    pub doc_id: String,
    pub row: usize,
    pub rank: usize,
    pub score: f32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub kb_id: String,
    pub hits: Vec<RetrievedPassage>,
    pub knowledge_text: String,
    pub tokens_retrieved: usize,
    pub tokens_injected: usize,
}

/// MoKB argmax over description similarity; ties go to the earliest KB.
pub fn select_by_description(query_vec: &[f32], kbs: &[Arc<KnowledgeBase>]) -> Result<usize, RetrievalError> {
    if kbs.is_empty() {
        return Err(RetrievalError::NoKnowledgeBases);
    }
    let mut best: Option<(usize, f32)> = None;
    for (i, kb) in kbs.iter().enumerate() {
        let dv = kb
            .description_vec()
            .ok_or_else(|| RetrievalError::MissingDescription(kb.kb_id.clone()))?;
        let s = cosine(query_vec, dv)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Pick the knowledge base for a query. `Ok(None)` means retrieval is off.
pub fn select_kb(
    query: &str,
    kbs: &[Arc<KnowledgeBase>],
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<Option<String>, RetrievalError> {
    match cfg.mode {
        RetrievalMode::Off => Ok(None),
        RetrievalMode::Manual => {
            let id = cfg
                .selected_kb
                .as_deref()
                .ok_or_else(|| RetrievalError::InvalidConfig("manual mode needs a selected knowledge base".into()))?;
            kbs.iter()
                .find(|kb| kb.kb_id == id)
                .map(|kb| Some(kb.kb_id.clone()))
                .ok_or_else(|| RetrievalError::UnknownKb(id.to_string()))
        }
        RetrievalMode::Mokb => {
            if kbs.is_empty() {
                return Err(RetrievalError::NoKnowledgeBases);
            }
            let qv = embed_one(embedder, query)?;
            let i = select_by_description(&qv, kbs)?;
            Ok(Some(kbs[i].kb_id.clone()))
        }
    }
}

/// Passage texts, trimmed, newline-joined in rank order.
pub fn join_passages<S: AsRef<str>>(texts: &[S]) -> String {
    texts
        .iter()
        .map(|t| t.as_ref().trim())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Keep the first `ceil(N * weight / 100)` whitespace tokens of `full`.
///
/// Kept tokens are re-joined with a single space, or a newline where the
/// original gap contained one. Weight 100 returns `full` untouched.
pub fn truncate_knowledge(full: &str, weight: u8) -> String {
    if weight >= 100 {
        return full.to_string();
    }
    if weight == 0 {
        return String::new();
    }
    let n = full.split_whitespace().count();
    let keep = (n * weight as usize).div_ceil(100);
    let mut out = String::new();
    let mut kept = 0;
    let mut gap_has_newline = false;
    let mut rest = full;
    while kept < keep {
        let start = match rest.find(|c: char| !c.is_whitespace()) {
            Some(s) => s,
            None => break,
        };
        gap_has_newline = gap_has_newline || rest[..start].contains('\n');
        rest = &rest[start..];
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        if kept > 0 {
            out.push(if gap_has_newline { '\n' } else { ' ' });
        }
        out.push_str(&rest[..end]);
        rest = &rest[end..];
        gap_has_newline = false;
        kept += 1;
    }
    out
}

/// Explicit prompt-weighting over ranked passage texts.
pub fn apply_epw<S: AsRef<str>>(passage_texts: &[S], weight_percent: u8) -> String {
    truncate_knowledge(&join_passages(passage_texts), weight_percent)
}

/// Retrieve with a precomputed query embedding.
pub fn retrieve_with_vec(
    query_vec: &[f32],
    kb: &KnowledgeBase,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    if cfg.epw_weight > 100 {
        return Err(RetrievalError::InvalidConfig("epw_weight above 100".into()));
    }
    let raw = kb.index().search(query_vec, cfg.k, cfg.ef_search)?;
    let mut hits = Vec::with_capacity(raw.len());
    for h in raw {
        let p = kb.store().get(h.row).ok_or_else(|| RetrievalError::Inconsistent {
            kb: kb.kb_id.clone(),
            message: format!("row {} missing from passage store", h.row),
        })?;
        hits.push(RetrievedPassage {
            passage_id: p.passage_id.clone(),
            doc_id: p.doc_id.clone(),
            row: h.row,
            rank: h.rank,
            score: h.score,
            text: p.text.clone(),
        });
    }
    let full = join_passages(&hits.iter().map(|h| h.text.as_str()).collect::<Vec<_>>());
    let knowledge_text = truncate_knowledge(&full, cfg.epw_weight);
    Ok(RetrievalResult {
        kb_id: kb.kb_id.clone(),
        tokens_retrieved: full.split_whitespace().count(),
        tokens_injected: knowledge_text.split_whitespace().count(),
        hits,
        knowledge_text,
    })
}

pub fn retrieve(
    query: &str,
    kb: &KnowledgeBase,
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<RetrievalResult, RetrievalError> {
    let qv = embed_one(embedder, query)?;
    retrieve_with_vec(&qv, kb, cfg)
}
