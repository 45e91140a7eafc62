//! Text embedders: a remote HTTP embedding endpoint and a deterministic
//! hashing embedder used for offline tests.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;

/// Environment variable holding the bearer token for the embeddings endpoint.
pub const EMBED_TOKEN_ENV: &str = "RCG_EMBED_API_KEY";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding endpoint failed after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("embedding endpoint returned a malformed response: {0}")]
    Protocol(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("invalid embedder spec: {0}")]
    InvalidSpec(String),
}

impl EmbedError {
    /// Transport-level failures are worth retrying; configuration errors are not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Unreachable { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Remote,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub endpoint_url: String,
    pub model_name: String,
    pub dim: usize,
    pub normalize: bool,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retries: u32,
    pub timeout_ms: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            kind: EmbedderKind::Test,
            endpoint_url: String::new(),
            model_name: "test-hash".into(),
            dim: 64,
            normalize: true,
            batch_size: 32,
            max_in_flight: 4,
            retries: 3,
            timeout_ms: 30_000,
        }
    }
}

impl EmbedderSpec {
    pub fn test(dim: usize) -> Self {
        EmbedderSpec {
            dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::InvalidSpec("dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbedError::InvalidSpec("batch_size must be positive".into()));
        }
        if self.model_name.is_empty() {
            return Err(EmbedError::InvalidSpec("model_name must not be empty".into()));
        }
        if self.kind == EmbedderKind::Remote && self.endpoint_url.is_empty() {
            return Err(EmbedError::InvalidSpec("remote embedder needs endpoint_url".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::Test => Box::new(TestEmbedder::new(self.clone())),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(self.clone())),
        })
    }
}

pub trait Embedder: Send + Sync {
    fn spec(&self) -> &EmbedderSpec;

    /// Embed one batch. Implementations return raw vectors; dimension checks
    /// and normalization happen in [`embed_texts`].
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Embed `texts` in order, batching by the spec's batch size and keeping at
/// most `max_in_flight` batches outstanding at once.
pub fn embed_texts(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
    let spec = embedder.spec();
    let batches: Vec<&[String]> = texts.chunks(spec.batch_size.max(1)).collect();
    let in_flight = spec.max_in_flight.max(1);
    let mut out = Vec::with_capacity(texts.len());
    for group in batches.chunks(in_flight) {
        let results: Vec<Result<Vec<Vec<f32>>, EmbedError>> = if group.len() == 1 {
            vec![embedder.embed_batch(group[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|b| s.spawn(move || embedder.embed_batch(b)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            })
        };
        for (batch, result) in group.iter().zip(results) {
            let vecs = result?;
            if vecs.len() != batch.len() {
                return Err(EmbedError::Protocol(format!(
                    "expected {} vectors, got {}",
                    batch.len(),
                    vecs.len()
                )));
            }
            for mut v in vecs {
                if v.len() != spec.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: spec.dim,
                        got: v.len(),
                    });
                }
                if spec.normalize {
                    normalize(&mut v);
                }
                out.push(v);
            }
        }
    }
    Ok(out)
}

pub fn embed_one(embedder: &dyn Embedder, text: &str) -> Result<Vec<f32>, EmbedError> {
    let mut v = embed_texts(embedder, &[text.to_string()])?;
    Ok(v.pop().expect("one vector per text"))
}

/// Scale to unit L2 norm. All-zero vectors are left untouched.
pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// Inner product; equals cosine for unit vectors.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `count x dim` matrix of f32 embeddings with aligned ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self, EmbedError> {
        let mut m = EmbeddingMatrix::new(dim);
        if ids.len() != rows.len() {
            return Err(EmbedError::Protocol(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        for (id, row) in ids.into_iter().zip(rows) {
            m.push(id, &row)?;
        }
        Ok(m)
    }

    /// Build from a flat buffer; ids default to the row number.
    pub fn from_flat(dim: usize, data: Vec<f32>) -> Result<Self, EmbedError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(EmbedError::InvalidSpec(format!(
                "buffer of {} floats is not a multiple of dim {dim}",
                data.len()
            )));
        }
        let ids = (0..data.len() / dim).map(|i| i.to_string()).collect();
        Ok(EmbeddingMatrix { dim, ids, data })
    }

    pub fn push(&mut self, id: String, row: &[f32]) -> Result<(), EmbedError> {
        if row.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn set_ids(&mut self, ids: Vec<String>) -> Result<(), EmbedError> {
        if ids.len() != self.count() {
            return Err(EmbedError::Protocol(format!(
                "{} ids for {} rows",
                ids.len(),
                self.count()
            )));
        }
        self.ids = ids;
        Ok(())
    }
}

// FNV-1a, 64 bit. Stable across platforms and releases, unlike std's hasher.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in *part {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Weight of each character trigram relative to a whole-token hit.
const TRIGRAM_WEIGHT: f32 = 0.1;

/// Lowercase and trim non-alphanumeric characters from both ends.
pub fn normalize_token(tok: &str) -> String {
    tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Deterministic feature-hashing embedding.
///
/// Each normalized whitespace token adds 1.0 to its hashed bucket and
/// [`TRIGRAM_WEIGHT`] to the bucket of each of its character trigrams. Text
/// without tokens maps to the unit vector on bucket 0.
pub fn test_embed(text: &str, dim: usize) -> Vec<f32> {
    let dim = dim.max(1);
    let mut v = vec![0f32; dim];
    for raw in text.split_whitespace() {
        let tok = normalize_token(raw);
        if tok.is_empty() {
            continue;
        }
        v[(fnv1a(&[b"t:", tok.as_bytes()]) % dim as u64) as usize] += 1.0;
        let chars: Vec<char> = tok.chars().collect();
        if chars.len() < 3 {
            v[(fnv1a(&[b"g:", tok.as_bytes()]) % dim as u64) as usize] += TRIGRAM_WEIGHT;
            continue;
        }
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            v[(fnv1a(&[b"g:", &buf[..len]]) % dim as u64) as usize] += TRIGRAM_WEIGHT;
        }
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    normalize(&mut v);
    v
}

#[derive(Debug, Clone)]
pub struct TestEmbedder {
    spec: EmbedderSpec,
    exec: Exec,
}

impl TestEmbedder {
    pub fn new(spec: EmbedderSpec) -> Self {
        TestEmbedder {
            spec,
            exec: Exec::default(),
        }
    }

    pub fn with_dim(dim: usize) -> Self {
        TestEmbedder::new(EmbedderSpec::test(dim))
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

impl Embedder for TestEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let dim = self.spec.dim;
        Ok(self.exec.map(texts, |t| test_embed(t, dim)))
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// Client for `POST {model, input} -> {data: [{index, embedding}]}` endpoints.
pub struct RemoteEmbedder {
    spec: EmbedderSpec,
    agent: ureq::Agent,
    token: Option<String>,
}

impl RemoteEmbedder {
    pub fn new(spec: EmbedderSpec) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(spec.timeout_ms.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteEmbedder {
            spec,
            agent,
            token: std::env::var(EMBED_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        }
    }

    fn attempt(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, (bool, String)> {
        let mut req = self.agent.post(&self.spec.endpoint_url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let body = EmbeddingRequest {
            model: &self.spec.model_name,
            input: texts,
        };
        let mut resp = req.send_json(&body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}")));
        }
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| (false, format!("bad JSON: {e}")))?;
        let mut data = parsed.data;
        data.sort_by_key(|d| d.index);
        if data.iter().enumerate().any(|(i, d)| d.index != i) {
            return Err((false, "response indices are not 0..n".into()));
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

impl Embedder for RemoteEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let attempts = self.spec.retries + 1;
        let mut backoff = Duration::from_millis(100);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(texts) {
                Ok(v) => return Ok(v),
                Err((false, msg)) => return Err(EmbedError::Protocol(msg)),
                Err((true, msg)) => {
                    tracing::debug!(attempt, error = %msg, "embedding request failed");
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(EmbedError::Unreachable {
            attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &str, b: &str) -> f32 {
        cosine(&test_embed(a, 64), &test_embed(b, 64)).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn test_embedder_contract() {
        let e = TestEmbedder::with_dim(64);
        let texts = vec!["abc".to_string(), "abc".to_string()];
        let v = embed_texts(&e, &texts).unwrap();
        assert_eq!(v[0], v[1]);
        for t in ["a b", "", "Kioxia has factories in Yokkaichi.", "日本語 テキスト"] {
            let v = test_embed(t, 64);
            assert_eq!(v.len(), 64);
            assert!((l2_norm(&v) - 1.0).abs() < 1e-6, "{t}");
        }
        assert!((cos("a b", "a b") - 1.0).abs() < 1e-6);
        let mut fallback = vec![0f32; 64];
        fallback[0] = 1.0;
        assert_eq!(test_embed("", 64), fallback);
        assert_eq!(test_embed(" ?! ", 64), fallback);
    }

    #[test]
    fn shared_tokens_score_higher() {
        let related = cos("red apple", "red apple pie");
        let unrelated = cos("red apple", "blue sky");
        assert!(related > unrelated, "{related} vs {unrelated}");
    }

    #[test]
    fn dimension_mismatch_is_fatal() {
        struct Wrong(EmbedderSpec);
        impl Embedder for Wrong {
            fn spec(&self) -> &EmbedderSpec {
                &self.0
            }
            fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
                Ok(texts.iter().map(|_| vec![1.0; 3]).collect())
            }
        }
        let err = embed_texts(&Wrong(EmbedderSpec::test(4)), &["x".into()]).unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch { expected: 4, got: 3 }));
        assert!(!err.is_retryable());
    }

    #[test]
    fn batching_preserves_order() {
        let spec = EmbedderSpec {
            batch_size: 3,
            max_in_flight: 2,
            ..EmbedderSpec::test(16)
        };
        let e = TestEmbedder::new(spec);
        let texts: Vec<String> = (0..20).map(|i| format!("token{i} other{}", i % 3)).collect();
        let got = embed_texts(&e, &texts).unwrap();
        for (t, v) in texts.iter().zip(&got) {
            assert_eq!(v, &test_embed(t, 16));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(EmbedderSpec::test(0).validate().is_err());
        let remote = EmbedderSpec {
            kind: EmbedderKind::Remote,
            ..Default::default()
        };
        assert!(remote.validate().is_err());
    }
}
