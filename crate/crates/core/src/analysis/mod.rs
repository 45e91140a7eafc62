//! Similarity diagnostics, the per-turn log, and the evaluation harness.

mod eval;
mod log;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, embed_one, embed_texts, EmbedError, Embedder};

pub use eval::{
    format_report, format_summary, load_dataset, parse_approaches, parse_sweep, run_eval, Approach, EvalPair,
    EvalReport, EvalRow,
};
pub use log::{read_log_page, AnalysisLog, AnalysisRecord, LatencyMs, RetrievedRef};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dataset {path}: {message}")]
    Dataset { path: String, message: String },
    #[error("invalid approach list: {0}")]
    Approach(String),
    #[error("analysis log: {0}")]
    Log(#[from] std::io::Error),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Lowercased whitespace tokens with non-alphanumeric edges removed.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return RougeScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let precision = lcs / c.len() as f64;
    let recall = lcs / r.len() as f64;
    RougeScore {
        precision,
        recall,
        f1: 2.0 * precision * recall / (precision + recall),
    }
}

/// Cosine between the query and passage embeddings.
pub fn sentence_sim(query: &str, passage: &str, embedder: &dyn Embedder) -> Result<f32, EmbedError> {
    let v = embed_texts(embedder, &[query.to_string(), passage.to_string()])?;
    cosine(&v[0], &v[1])
}

/// Mean over query tokens of the best cosine against any passage token.
pub fn token_sim(query: &str, passage: &str, embedder: &dyn Embedder) -> Result<f32, EmbedError> {
    let q: Vec<String> = query.split_whitespace().map(str::to_string).collect();
    let p: Vec<String> = passage.split_whitespace().map(str::to_string).collect();
    if q.is_empty() || p.is_empty() {
        return Ok(0.0);
    }
    let qv = embed_texts(embedder, &q)?;
    let pv = embed_texts(embedder, &p)?;
    let mut total = 0f64;
    for a in &qv {
        let mut best = f32::NEG_INFINITY;
        for b in &pv {
            best = best.max(cosine(a, b)?);
        }
        total += best as f64;
    }
    Ok((total / qv.len() as f64) as f32)
}

/// Both similarity lists for one turn, one entry per passage.
pub fn turn_similarities<S: AsRef<str>>(
    query: &str,
    passages: &[S],
    embedder: &dyn Embedder,
) -> Result<(Vec<f32>, Vec<f32>), EmbedError> {
    let qv = embed_one(embedder, query)?;
    let mut sentence = Vec::with_capacity(passages.len());
    let mut token = Vec::with_capacity(passages.len());
    for p in passages {
        let pv = embed_one(embedder, p.as_ref())?;
        sentence.push(cosine(&qv, &pv)?);
        token.push(token_sim(query, p.as_ref(), embedder)?);
    }
    Ok((sentence, token))
}
