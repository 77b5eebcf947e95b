//! Incremental nearest-neighbor indices over configurations.
//!
//! Two backends share [`NeighborIndex`]: an exact linear scan and a layered
//! proximity graph (HNSW). Ids are assigned in insertion order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait NeighborIndex: Send + Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Stores `q` and returns its id.
    fn insert(&mut self, q: &[f64]) -> Result<usize>;
    /// Up to `k` stored ids with Euclidean distances, nearest first.
    fn nearest(&self, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>>;
    fn point(&self, id: usize) -> &[f64];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum IndexKind {
    Exact,
    Hnsw(HnswParams),
}

impl Default for IndexKind {
    fn default() -> Self {
        IndexKind::Exact
    }
}

/// Builds an empty index of the requested kind.
pub fn new_index(kind: IndexKind, dim: usize, seed: u64) -> Box<dyn NeighborIndex> {
    match kind {
        IndexKind::Exact => Box::new(ExactIndex::new(dim)),
        IndexKind::Hnsw(p) => Box::new(HnswIndex::new(dim, p, seed)),
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_query(dim: usize, len: usize, q: &[f64], k: usize) -> Result<()> {
    Error::check_dim(dim, q.len())?;
    if len == 0 {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    Ok(())
}

/// Linear scan over contiguous storage.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    dim: usize,
    data: Vec<f64>,
}

impl ExactIndex {
    pub fn new(dim: usize) -> Self {
        ExactIndex { dim, data: Vec::new() }
    }
}

impl NeighborIndex for ExactIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn insert(&mut self, q: &[f64]) -> Result<usize> {
        Error::check_dim(self.dim, q.len())?;
        self.data.extend_from_slice(q);
        Ok(self.len() - 1)
    }

    fn nearest(&self, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        check_query(self.dim, self.len(), q, k)?;
        let mut all: Vec<(usize, f64)> = self
            .data
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, p)| (i, dist2(p, q)))
            .collect();
        let k = k.min(all.len());
        let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, cmp);
            all.truncate(k);
        }
        all.sort_by(cmp);
        Ok(all.into_iter().map(|(i, d)| (i, d.sqrt())).collect())
    }

    fn point(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnswParams {
    /// Graph degree on upper layers (layer 0 allows twice this).
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Cand {
    d: f64,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, o: &Self) -> Ordering {
        self.d.total_cmp(&o.d).then(self.id.cmp(&o.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Hierarchical navigable small-world graph.
#[derive(Debug, Clone)]
pub struct HnswIndex {
    dim: usize,
    params: HnswParams,
    level_mult: f64,
    data: Vec<f64>,
    /// `links[node][layer]` neighbor lists.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    top: usize,
    rng: ChaCha8Rng,
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams, seed: u64) -> Self {
        let m = params.m.max(2);
        HnswIndex {
            dim,
            params: HnswParams { m, ..params },
            level_mult: 1.0 / (m as f64).ln(),
            data: Vec::new(),
            links: Vec::new(),
            entry: None,
            top: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn vec(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    /// Beam search on one layer; returns up to `ef` candidates, nearest first.
    fn search_layer(&self, q: &[f64], entry: &[Cand], ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited: HashSet<u32> = entry.iter().map(|c| c.id).collect();
        let mut frontier: BinaryHeap<std::cmp::Reverse<Cand>> = entry.iter().map(|&c| std::cmp::Reverse(c)).collect();
        let mut best: BinaryHeap<Cand> = entry.iter().copied().collect();
        while let Some(std::cmp::Reverse(c)) = frontier.pop() {
            let worst = best.peek().map(|w| w.d).unwrap_or(f64::INFINITY);
            if c.d > worst && best.len() >= ef {
                break;
            }
            for &nb in &self.links[c.id as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let d = dist2(q, self.vec(nb));
                let worst = best.peek().map(|w| w.d).unwrap_or(f64::INFINITY);
                if best.len() < ef || d < worst {
                    let cand = Cand { d, id: nb };
                    frontier.push(std::cmp::Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Neighbor selection heuristic: keep a candidate only if it is closer to
    /// the base than to every neighbor already kept.
    fn select(&self, cands: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut skipped = Vec::new();
        for &c in cands {
            if kept.len() >= m {
                break;
            }
            let ok = kept.iter().all(|k| dist2(self.vec(c.id), self.vec(k.id)) > c.d);
            if ok {
                kept.push(c);
            } else {
                skipped.push(c);
            }
        }
        for c in skipped {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|c| c.id).collect()
    }

    fn prune(&mut self, node: u32, layer: usize) {
        let cap = self.max_degree(layer);
        if self.links[node as usize][layer].len() <= cap {
            return;
        }
        let base = self.vec(node).to_vec();
        let mut cands: Vec<Cand> = self.links[node as usize][layer]
            .iter()
            .map(|&id| Cand {
                d: dist2(&base, self.vec(id)),
                id,
            })
            .collect();
        cands.sort();
        let kept = self.select(&cands, cap);
        self.links[node as usize][layer] = kept;
    }
}

impl NeighborIndex for HnswIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.links.len()
    }

    fn insert(&mut self, q: &[f64]) -> Result<usize> {
        Error::check_dim(self.dim, q.len())?;
        let id = self.links.len() as u32;
        let u: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let level = (-u.ln() * self.level_mult).floor() as usize;
        self.data.extend_from_slice(q);
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.top = level;
            return Ok(id as usize);
        };
        let mut ep = vec![Cand {
            d: dist2(q, self.vec(entry)),
            id: entry,
        }];
        for layer in (level + 1..=self.top).rev() {
            ep = self.search_layer(q, &ep, 1, layer);
        }
        for layer in (0..=level.min(self.top)).rev() {
            let cands = self.search_layer(q, &ep, self.params.ef_construction, layer);
            let chosen = self.select(&cands, self.params.m);
            for &nb in &chosen {
                self.links[nb as usize][layer].push(id);
                self.prune(nb, layer);
            }
            self.links[id as usize][layer] = chosen;
            ep = cands;
        }
        if level > self.top {
            self.top = level;
            self.entry = Some(id);
        }
        Ok(id as usize)
    }

    fn nearest(&self, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        check_query(self.dim, self.len(), q, k)?;
        let entry = self.entry.expect("non-empty");
        let mut ep = vec![Cand {
            d: dist2(q, self.vec(entry)),
            id: entry,
        }];
        for layer in (1..=self.top).rev() {
            ep = self.search_layer(q, &ep, 1, layer);
        }
        let found = self.search_layer(q, &ep, self.params.ef_search.max(k), 0);
        Ok(found
            .into_iter()
            .take(k)
            .map(|c| (c.id as usize, dist2(q, self.vec(c.id)).sqrt()))
            .collect())
    }

    fn point(&self, id: usize) -> &[f64] {
        self.vec(id as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
    }

    #[test]
    fn insert_then_query_returns_same_id() {
        for kind in [IndexKind::Exact, IndexKind::Hnsw(HnswParams::default())] {
            let mut idx = new_index(kind, 3, 1);
            assert!(matches!(idx.nearest(&[0.0; 3], 1), Err(Error::EmptyIndex)));
            let pts = random_points(50, 3, 2);
            for (i, p) in pts.iter().enumerate() {
                assert_eq!(idx.insert(p).unwrap(), i);
                let r = idx.nearest(p, 1).unwrap();
                assert_eq!(r[0], (i, 0.0));
            }
            let all = idx.nearest(&[0.0; 3], 50).unwrap();
            assert_eq!(all.len(), 50);
            assert!(all.windows(2).all(|w| w[0].1 <= w[1].1));
            let ids: HashSet<usize> = all.iter().map(|x| x.0).collect();
            assert_eq!(ids.len(), 50);
        }
    }

    #[test]
    fn single_point_index() {
        let mut idx = ExactIndex::new(2);
        idx.insert(&[1.0, 1.0]).unwrap();
        assert_eq!(idx.nearest(&[-5.0, 2.0], 3).unwrap().len(), 1);
        assert_eq!(idx.nearest(&[-5.0, 2.0], 1).unwrap()[0].0, 0);
    }

    #[test]
    fn exact_matches_linear_scan() {
        let pts = random_points(1000, 7, 3);
        let mut idx = ExactIndex::new(7);
        for p in &pts {
            idx.insert(p).unwrap();
        }
        for q in random_points(200, 7, 4) {
            let r = idx.nearest(&q, 5).unwrap();
            let mut brute: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, dist2(p, &q).sqrt())).collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1));
            assert_eq!(r[0].0, brute[0].0);
            for (a, b) in r.iter().zip(&brute) {
                assert!((a.1 - b.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hnsw_recall_and_honest_distances() {
        let pts = random_points(5000, 7, 5);
        let mut idx = HnswIndex::new(7, HnswParams::default(), 6);
        let mut exact = ExactIndex::new(7);
        for p in &pts {
            idx.insert(p).unwrap();
            exact.insert(p).unwrap();
        }
        let queries = random_points(1000, 7, 7);
        let mut hits = 0;
        for q in &queries {
            let a = idx.nearest(q, 3).unwrap();
            let e = exact.nearest(q, 1).unwrap();
            if a[0].0 == e[0].0 {
                hits += 1;
            }
            for (id, d) in a {
                assert!((d - dist2(&pts[id], q).sqrt()).abs() < 1e-12);
            }
        }
        assert!(hits as f64 / 1000.0 >= 0.95, "recall {hits}/1000");
    }
}
