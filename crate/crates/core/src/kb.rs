//! Knowledge-base construction: ingest, embed and index into one directory.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{IndexSpec, INDEX_FILE, PASSAGES_FILE};
use crate::embed::{embed_texts, EmbedError, Embedder, EmbeddingMatrix};
use crate::index::{FlatIndex, HnswIndex, IndexError, IndexKind, VectorIndex};
use crate::ingest::{build_passage_store, discover, load_stream, IngestError, LoadFailure, LoaderRegistry, PassageReader, SplitterConfig};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("cannot create {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub documents: usize,
    pub passages: usize,
    pub dim: usize,
    pub index_kind: IndexKind,
    pub passage_store: PathBuf,
    pub index_path: PathBuf,
    pub skipped: Vec<LoadFailure>,
    pub replaced_sequences: usize,
}

/// Passages are embedded in slices of this many records while streaming the store.
const EMBED_SLICE: usize = 1024;

pub fn build_kb<P: AsRef<Path>>(
    inputs: &[P],
    out_dir: &Path,
    splitter: &SplitterConfig,
    embedder: &dyn Embedder,
    index: &IndexSpec,
) -> Result<BuildReport, BuildError> {
    fs::create_dir_all(out_dir).map_err(|source| BuildError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let registry = LoaderRegistry::default();
    let files = discover(inputs, &registry.extensions())?;
    let passage_store = out_dir.join(PASSAGES_FILE);
    let stats = build_passage_store(load_stream(files, registry), splitter, &passage_store)?;

    let dim = embedder.spec().dim;
    let mut matrix = EmbeddingMatrix::new(dim);
    let mut reader = PassageReader::open(&passage_store)?;
    loop {
        let mut ids = Vec::with_capacity(EMBED_SLICE);
        let mut texts = Vec::with_capacity(EMBED_SLICE);
        for p in reader.by_ref().take(EMBED_SLICE) {
            let p = p?;
            ids.push(p.passage_id);
            texts.push(p.text);
        }
        if texts.is_empty() {
            break;
        }
        for (id, v) in ids.into_iter().zip(embed_texts(embedder, &texts)?) {
            matrix.push(id, &v)?;
        }
    }

    let built = match index.kind {
        IndexKind::Flat => VectorIndex::Flat(FlatIndex::build(matrix)),
        IndexKind::Hnsw => VectorIndex::Hnsw(HnswIndex::build(matrix, index.hnsw_params())?),
    };
    let index_path = out_dir.join(INDEX_FILE);
    built.save(&index_path, &embedder.spec().model_name)?;
    Ok(BuildReport {
        documents: stats.documents,
        passages: stats.records,
        dim,
        index_kind: index.kind,
        passage_store,
        index_path,
        skipped: stats.skipped,
        replaced_sequences: stats.replaced_sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::TestEmbedder;
    use crate::index::load_index;
    use crate::ingest::PassageStore;

    #[test]
    fn build_is_deterministic_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        fs::write(src.join("a.txt"), "alpha beta gamma. delta epsilon zeta eta theta").unwrap();
        fs::write(src.join("b.md"), "# Title\n\niota kappa lambda mu").unwrap();
        let e = TestEmbedder::with_dim(16);
        let split = SplitterConfig::new(4, 1, Default::default());
        let spec = IndexSpec {
            m: 4,
            ef_construction: 16,
            ..Default::default()
        };
        let r1 = build_kb(&[&src], &dir.path().join("one"), &split, &e, &spec).unwrap();
        let r2 = build_kb(&[&src], &dir.path().join("two"), &split, &e, &spec).unwrap();
        assert_eq!(r1.documents, 2);
        assert_eq!(r1.passages, r2.passages);
        assert_eq!(fs::read(&r1.index_path).unwrap(), fs::read(&r2.index_path).unwrap());
        let store = PassageStore::open(&r1.passage_store).unwrap();
        let idx = load_index(&r1.index_path, Some("test-hash")).unwrap();
        assert_eq!(idx.count(), store.len());
        assert_eq!(idx.kind(), IndexKind::Hnsw);
    }
}
