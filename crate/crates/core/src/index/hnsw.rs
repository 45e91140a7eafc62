//! Hierarchical navigable small world graph.
//!
//! Construction follows the usual insertion procedure: each node draws a
//! top level from an exponential distribution with multiplier `1 / ln M`,
//! descends greedily through the levels above it, and at each of its own
//! levels runs an `ef_construction`-wide beam search whose results are pruned
//! with the neighbor-selection heuristic. Neighbors that overflow their
//! degree bound are re-pruned with the same heuristic. All randomness comes
//! from a seeded ChaCha stream, so a given seed and insertion order always
//! yield the same graph.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{to_hits, unit_query, IndexError, Scored, SearchHit};
use crate::embed::{dot, EmbeddingMatrix};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HnswParams {
    /// Max neighbors per node above layer 0.
    pub m: usize,
    /// Max neighbors per node on layer 0.
    pub m0: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams::new(16, 200, 42)
    }
}

impl HnswParams {
    pub fn new(m: usize, ef_construction: usize, seed: u64) -> Self {
        HnswParams {
            m,
            m0: 2 * m,
            ef_construction,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::InvalidParams(format!("M must be >= 2, got {}", self.m)));
        }
        if self.m0 < self.m {
            return Err(IndexError::InvalidParams("M0 must be >= M".into()));
        }
        if self.ef_construction < self.m {
            return Err(IndexError::InvalidParams(format!(
                "ef_construction ({}) must be >= M ({})",
                self.ef_construction, self.m
            )));
        }
        Ok(())
    }

    pub fn level_mult(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }
}

/// Result of a structural self-check.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphReport {
    pub degree_violations: usize,
    pub invalid_edges: usize,
    pub unreachable: usize,
}

impl GraphReport {
    pub fn is_sound(&self) -> bool {
        self.degree_violations == 0 && self.invalid_edges == 0 && self.unreachable == 0
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    matrix: EmbeddingMatrix,
    params: HnswParams,
    /// `links[node][level]` lists the node's neighbors on that level.
    links: Vec<Vec<Vec<u32>>>,
    entry_point: Option<u32>,
}

struct Visited {
    stamps: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            stamps: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamps.fill(0);
            self.epoch = 1;
        }
    }

    /// Marks `id`; returns false if it was already marked this epoch.
    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.stamps[id as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

impl HnswIndex {
    pub fn build(matrix: EmbeddingMatrix, params: HnswParams) -> Result<Self, IndexError> {
        params.validate()?;
        let n = matrix.count();
        let mut idx = HnswIndex {
            matrix,
            params,
            links: Vec::with_capacity(n),
            entry_point: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mult = params.level_mult();
        let mut visited = Visited::new(n);
        for node in 0..n {
            let u: f64 = rng.random();
            let level = ((-(1.0 - u).ln()) * mult).floor() as usize;
            idx.insert(node as u32, level.min(MAX_LEVEL), &mut visited);
        }
        Ok(idx)
    }

    /// Reassemble an index from persisted parts, checking graph references.
    pub(crate) fn from_parts(
        matrix: EmbeddingMatrix,
        params: HnswParams,
        links: Vec<Vec<Vec<u32>>>,
        entry_point: Option<u32>,
    ) -> Result<Self, IndexError> {
        let n = matrix.count();
        if links.len() != n {
            return Err(IndexError::Format("adjacency does not match row count".into()));
        }
        if entry_point.map_or(n > 0, |e| e as usize >= n) {
            return Err(IndexError::Format("bad entry point".into()));
        }
        if links.iter().flatten().flatten().any(|&id| id as usize >= n) {
            return Err(IndexError::Format("edge references a missing node".into()));
        }
        Ok(HnswIndex {
            matrix,
            params,
            links,
            entry_point,
        })
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry_point
    }

    pub fn node_level(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    pub fn max_level(&self) -> usize {
        self.entry_point
            .map(|e| self.node_level(e as usize))
            .unwrap_or(0)
    }

    pub fn neighbors(&self, node: usize, level: usize) -> &[u32] {
        self.links[node].get(level).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub(crate) fn links(&self) -> &[Vec<Vec<u32>>] {
        &self.links
    }

    fn max_degree(&self, level: usize) -> usize {
        if level == 0 {
            self.params.m0
        } else {
            self.params.m
        }
    }

    #[inline]
    fn sim_to(&self, q: &[f32], id: u32) -> f32 {
        dot(q, self.matrix.row(id as usize))
    }

    fn greedy_step(&self, q: &[f32], mut best: Scored, level: usize) -> Scored {
        loop {
            let mut changed = false;
            for &nb in self.neighbors(best.id as usize, level) {
                let s = Scored {
                    score: self.sim_to(q, nb),
                    id: nb,
                };
                if s > best {
                    best = s;
                    changed = true;
                }
            }
            if !changed {
                return best;
            }
        }
    }

    /// Beam search on one level; returns up to `ef` nodes, best first.
    fn search_layer(&self, q: &[f32], entry: &[Scored], ef: usize, level: usize, visited: &mut Visited) -> Vec<Scored> {
        visited.reset();
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entry {
            if visited.insert(e.id) {
                candidates.push(e);
                results.push(Reverse(e));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().expect("results non-empty").0;
            if results.len() >= ef && c < worst {
                break;
            }
            for &nb in self.neighbors(c.id as usize, level) {
                if !visited.insert(nb) {
                    continue;
                }
                let s = Scored {
                    score: self.sim_to(q, nb),
                    id: nb,
                };
                let worst = results.peek().expect("results non-empty").0;
                if results.len() < ef || s > worst {
                    candidates.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Keep a candidate only if it is closer to the base than to every
    /// neighbor already kept. `candidates` must be sorted best first.
    fn select_neighbors(&self, candidates: &[Scored], m: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        for c in candidates {
            if kept.len() >= m {
                break;
            }
            let row = self.matrix.row(c.id as usize);
            if kept.iter().all(|&k| dot(row, self.matrix.row(k as usize)) < c.score) {
                kept.push(c.id);
            }
        }
        kept
    }

    fn insert(&mut self, node: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry_point else {
            self.entry_point = Some(node);
            return;
        };
        let q = self.matrix.row(node as usize).to_vec();
        let top = self.max_level();
        let mut ep = Scored {
            score: self.sim_to(&q, entry),
            id: entry,
        };
        for lc in (level + 1..=top).rev() {
            ep = self.greedy_step(&q, ep, lc);
        }
        let mut eps = vec![ep];
        for lc in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, lc, visited);
            let chosen = self.select_neighbors(&found, self.params.m);
            let cap = self.max_degree(lc);
            for &nb in &chosen {
                let list = &mut self.links[nb as usize][lc];
                list.push(node);
                if list.len() > cap {
                    self.shrink(nb, lc, cap);
                }
            }
            self.links[node as usize][lc] = chosen;
            eps = found;
        }
        if level > top {
            self.entry_point = Some(node);
        }
    }

    fn shrink(&mut self, node: u32, level: usize, cap: usize) {
        let base = self.matrix.row(node as usize);
        let mut cands: Vec<Scored> = self.links[node as usize][level]
            .iter()
            .map(|&id| Scored {
                score: dot(base, self.matrix.row(id as usize)),
                id,
            })
            .collect();
        cands.sort_unstable_by(|a, b| b.cmp(a));
        self.links[node as usize][level] = self.select_neighbors(&cands, cap);
    }

    /// Approximate top-k; returned scores are exact inner products.
    pub fn search(&self, query: &[f32], k: usize, ef_search: usize) -> Result<Vec<SearchHit>, IndexError> {
        let q = unit_query(query, self.matrix.dim())?;
        let k = k.min(self.matrix.count());
        let Some(entry) = self.entry_point else {
            return Ok(Vec::new());
        };
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut ep = Scored {
            score: self.sim_to(&q, entry),
            id: entry,
        };
        for lc in (1..=self.max_level()).rev() {
            ep = self.greedy_step(&q, ep, lc);
        }
        let mut visited = Visited::new(self.matrix.count());
        let found = self.search_layer(&q, &[ep], ef_search.max(k), 0, &mut visited);
        Ok(to_hits(found, k))
    }

    /// Degree bounds, edge validity, and reachability of every node from the
    /// entry point over the union of all levels.
    pub fn check_graph(&self) -> GraphReport {
        let n = self.matrix.count();
        let mut report = GraphReport::default();
        for node in &self.links {
            for (level, nbs) in node.iter().enumerate() {
                if nbs.len() > self.max_degree(level) {
                    report.degree_violations += 1;
                }
                report.invalid_edges += nbs
                    .iter()
                    .filter(|&&id| id as usize >= n || self.links[id as usize].len() <= level)
                    .count();
            }
        }
        let Some(entry) = self.entry_point else {
            return report;
        };
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([entry]);
        seen[entry as usize] = true;
        while let Some(u) = queue.pop_front() {
            for nbs in &self.links[u as usize] {
                for &v in nbs {
                    if (v as usize) < n && !seen[v as usize] {
                        seen[v as usize] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        report.unreachable = seen.iter().filter(|s| !**s).count();
        report
    }
}
