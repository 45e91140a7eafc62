use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{to_hits, unit_query, IndexError, Scored, SearchHit};
use crate::embed::{dot, EmbeddingMatrix};
use crate::exec::Exec;

const SCAN_CHUNK: usize = 2048;

/// Exact search by scanning every row.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    matrix: EmbeddingMatrix,
    exec: Exec,
}

impl FlatIndex {
    pub fn build(matrix: EmbeddingMatrix) -> Self {
        FlatIndex {
            matrix,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>, IndexError> {
        self.search_with(query, k, self.exec)
    }

    /// Exact top-k. `k` is clamped to the number of rows.
    pub fn search_with(&self, query: &[f32], k: usize, exec: Exec) -> Result<Vec<SearchHit>, IndexError> {
        let dim = self.matrix.dim();
        let q = unit_query(query, dim)?;
        let n = self.matrix.count();
        let k = k.min(n);
        if k == 0 {
            return Ok(Vec::new());
        }
        let data = self.matrix.as_flat();
        let rows_per_chunk = SCAN_CHUNK;
        let partial = exec.map_chunks(data, rows_per_chunk * dim, |offset, chunk| {
            let first_row = offset / dim;
            let mut heap: BinaryHeap<Reverse<Scored>> = BinaryHeap::with_capacity(k + 1);
            for (i, row) in chunk.chunks_exact(dim).enumerate() {
                let s = Scored {
                    score: dot(&q, row),
                    id: (first_row + i) as u32,
                };
                if heap.len() < k {
                    heap.push(Reverse(s));
                } else if s > heap.peek().expect("non-empty").0 {
                    heap.pop();
                    heap.push(Reverse(s));
                }
            }
            heap.into_iter().map(|r| r.0).collect::<Vec<_>>()
        });
        Ok(to_hits(partial.into_iter().flatten().collect(), k))
    }
}
