//! Vector indexes over a knowledge base's embedding matrix.
//!
//! Similarity is cosine, computed as an inner product over unit vectors.
//! Result lists are sorted by score descending with ties broken by ascending
//! row id, so flat search is fully deterministic.

mod flat;
mod hnsw;
mod persist;

use std::cmp::Ordering;
use std::path::Path;

use thiserror::Error;

use crate::embed::EmbeddingMatrix;
use crate::exec::Exec;

pub use flat::FlatIndex;
pub use hnsw::{GraphReport, HnswIndex, HnswParams};
pub use persist::{load_index, read_model_name, save_index, FORMAT_VERSION, MAGIC};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("not an index file: {0}")]
    Format(String),
    #[error("unsupported index format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("index file is truncated")]
    Truncated,
    #[error("index was built with embedder '{found}', configuration expects '{expected}'")]
    Fingerprint { expected: String, found: String },
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
    #[error("index I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl IndexError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            IndexError::Format(_) => "index.format",
            IndexError::Version { .. } => "index.version",
            IndexError::Truncated => "index.truncated",
            IndexError::Fingerprint { .. } => "index.fingerprint",
            IndexError::DimMismatch { .. } => "index.dim_mismatch",
            IndexError::InvalidParams(_) => "index.params",
            IndexError::Io(_) => "index.io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Flat,
    #[default]
    Hnsw,
}

impl IndexKind {
    pub(crate) fn tag(self) -> u8 {
        match self {
            IndexKind::Flat => 0,
            IndexKind::Hnsw => 1,
        }
    }
}

impl std::fmt::Display for IndexKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IndexKind::Flat => "flat",
            IndexKind::Hnsw => "hnsw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchHit {
    /// Row in the embedding matrix (and passage store).
    pub row: usize,
    pub score: f32,
    /// 1-based.
    pub rank: usize,
}

/// A scored node. `Ord` puts higher scores first and, on equal scores, the
/// lower id first, i.e. `a > b` means `a` ranks ahead of `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Scored {
    pub score: f32,
    pub id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) fn to_hits(mut scored: Vec<Scored>, k: usize) -> Vec<SearchHit> {
    scored.sort_unstable_by(|a, b| b.cmp(a));
    scored.truncate(k);
    scored
        .into_iter()
        .enumerate()
        .map(|(i, s)| SearchHit {
            row: s.id as usize,
            score: s.score,
            rank: i + 1,
        })
        .collect()
}

pub(crate) fn unit_query(q: &[f32], dim: usize) -> Result<Vec<f32>, IndexError> {
    if q.len() != dim {
        return Err(IndexError::DimMismatch {
            expected: dim,
            got: q.len(),
        });
    }
    let mut v = q.to_vec();
    crate::embed::normalize(&mut v);
    Ok(v)
}

#[derive(Debug, Clone)]
pub enum VectorIndex {
    Flat(FlatIndex),
    Hnsw(HnswIndex),
}

impl VectorIndex {
    pub fn kind(&self) -> IndexKind {
        match self {
            VectorIndex::Flat(_) => IndexKind::Flat,
            VectorIndex::Hnsw(_) => IndexKind::Hnsw,
        }
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        match self {
            VectorIndex::Flat(i) => i.matrix(),
            VectorIndex::Hnsw(i) => i.matrix(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix().dim()
    }

    pub fn count(&self) -> usize {
        self.matrix().count()
    }

    /// `ef_search` is ignored by the flat index.
    pub fn search(&self, query: &[f32], k: usize, ef_search: usize) -> Result<Vec<SearchHit>, IndexError> {
        match self {
            VectorIndex::Flat(i) => i.search(query, k),
            VectorIndex::Hnsw(i) => i.search(query, k, ef_search),
        }
    }

    pub fn search_batch(
        &self,
        queries: &[Vec<f32>],
        k: usize,
        ef_search: usize,
        exec: Exec,
    ) -> Result<Vec<Vec<SearchHit>>, IndexError> {
        exec.map(queries, |q| self.search(q, k, ef_search))
            .into_iter()
            .collect()
    }

    pub fn save(&self, path: &Path, model_name: &str) -> Result<(), IndexError> {
        save_index(self, path, model_name)
    }
}

/// Mean fraction of each exact top-k id set recovered by the approximate lists.
pub fn recall_at_k(approx: &[Vec<SearchHit>], exact: &[Vec<SearchHit>]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let total: f64 = approx
        .iter()
        .zip(exact)
        .map(|(a, e)| {
            if e.is_empty() {
                return 1.0;
            }
            let found = e.iter().filter(|h| a.iter().any(|x| x.row == h.row)).count();
            found as f64 / e.len() as f64
        })
        .sum();
    total / exact.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scored_ordering_breaks_ties_by_row() {
        let a = Scored { score: 0.5, id: 3 };
        let b = Scored { score: 0.5, id: 7 };
        let c = Scored { score: 0.9, id: 9 };
        assert!(a > b);
        assert!(c > a);
        let hits = to_hits(vec![b, a, c], 2);
        assert_eq!(hits.iter().map(|h| h.row).collect::<Vec<_>>(), vec![9, 3]);
        assert_eq!(hits[1].rank, 2);
    }

    #[test]
    fn recall_counts_overlap() {
        let h = |rows: &[usize]| {
            rows.iter()
                .enumerate()
                .map(|(i, r)| SearchHit { row: *r, score: 0.0, rank: i + 1 })
                .collect::<Vec<_>>()
        };
        let r = recall_at_k(&[h(&[1, 2, 3, 4])], &[h(&[1, 2, 5, 6])]);
        assert!((r - 0.5).abs() < 1e-12);
    }
}
