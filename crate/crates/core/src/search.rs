//! Greedy beam search, exact ground truth and recall / QPS evaluation.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::VectorDataset;
use crate::error::{usage, Result};
use crate::neighbor::{KnnGraph, NeighborEntry};

/// Where a search starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntryPoint {
    /// The graph's stored entry (its medoid), or node 0 for headerless graphs.
    #[default]
    Medoid,
    FixedNode(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    /// Candidate pool size `L`.
    pub beam: usize,
    pub topk: usize,
    pub entry: EntryPoint,
}

impl SearchParams {
    pub fn new(beam: usize, topk: usize) -> Self {
        Self {
            beam,
            topk,
            entry: EntryPoint::Medoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 || self.beam < self.topk {
            return Err(usage!(
                "search needs beam >= topk >= 1 (beam={}, topk={})",
                self.beam,
                self.topk
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Closest ids, ascending by (distance, id).
    pub ids: Vec<u32>,
    pub dists: Vec<f32>,
    /// Expanded nodes in expansion order; starts with the entry point.
    pub visited: Vec<u32>,
}

#[derive(Clone, Copy)]
struct PoolSlot {
    entry: NeighborEntry,
    expanded: bool,
}

/// Best-first search keeping the `beam` closest evaluated nodes.
///
/// Repeatedly expands the closest unexpanded pool member and stops once
/// every pool member has been expanded.
pub fn greedy_search(
    graph: &KnnGraph,
    dataset: &VectorDataset,
    query: &[f32],
    params: &SearchParams,
) -> Result<SearchResult> {
    params.validate()?;
    if graph.is_empty() {
        return Err(usage!("cannot search an empty graph"));
    }
    if query.len() != dataset.dim() {
        return Err(usage!(
            "query dimension {} does not match dataset dimension {}",
            query.len(),
            dataset.dim()
        ));
    }
    let start = match params.entry {
        EntryPoint::Medoid => graph.entry().unwrap_or(0),
        EntryPoint::FixedNode(id) => id,
    };
    if start as usize >= graph.len() {
        return Err(usage!("entry point {start} out of range"));
    }
    Ok(search_from(graph, dataset, query, start, params.beam, params.topk))
}

pub(crate) fn search_from(
    graph: &KnnGraph,
    dataset: &VectorDataset,
    query: &[f32],
    start: u32,
    beam: usize,
    topk: usize,
) -> SearchResult {
    let mut seen: HashSet<u32> = HashSet::with_capacity(beam * 4);
    let mut pool: Vec<PoolSlot> = Vec::with_capacity(beam + 1);
    let mut visited = Vec::new();

    seen.insert(start);
    pool.push(PoolSlot {
        entry: NeighborEntry::new(start, dataset.dist_to(start as usize, query)),
        expanded: false,
    });

    // Pool stays sorted; `cursor` is the first unexpanded slot.
    let mut cursor = 0;
    while cursor < pool.len() {
        pool[cursor].expanded = true;
        let node = pool[cursor].entry.id;
        visited.push(node);
        for nb in graph.list(node as usize).ids() {
            if !seen.insert(nb) {
                continue;
            }
            let cand = NeighborEntry::new(nb, dataset.dist_to(nb as usize, query));
            if pool.len() == beam && cand.order(&pool[beam - 1].entry).is_ge() {
                continue;
            }
            let pos = pool.partition_point(|s| s.entry.order(&cand).is_lt());
            pool.insert(
                pos,
                PoolSlot {
                    entry: cand,
                    expanded: false,
                },
            );
            pool.truncate(beam);
        }
        cursor = pool.iter().position(|s| !s.expanded).unwrap_or(pool.len());
    }

    let take = topk.min(pool.len());
    SearchResult {
        ids: pool[..take].iter().map(|s| s.entry.id).collect(),
        dists: pool[..take].iter().map(|s| s.entry.dist).collect(),
        visited,
    }
}

/// Exact top-k ids and distances per query, ascending by `(dist, id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    k: usize,
    ids: Vec<u32>,
    dists: Vec<f32>,
}

impl GroundTruth {
    pub fn new(k: usize, ids: Vec<u32>, dists: Vec<f32>) -> Result<Self> {
        if k == 0 || !ids.len().is_multiple_of(k) || dists.len() != ids.len() {
            return Err(usage!("ground truth arrays do not form rows of {k}"));
        }
        Ok(Self { k, ids, dists })
    }

    /// Ground truth without distances, e.g. loaded from `ivecs`.
    pub fn from_ids(k: usize, ids: Vec<u32>) -> Result<Self> {
        let dists = vec![f32::NAN; ids.len()];
        Self::new(k, ids, dists)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self, q: usize) -> &[u32] {
        &self.ids[q * self.k..(q + 1) * self.k]
    }

    pub fn dists(&self, q: usize) -> &[f32] {
        &self.dists[q * self.k..(q + 1) * self.k]
    }

    pub fn write_ivecs(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let data: Vec<i32> = self.ids.iter().map(|&i| i as i32).collect();
        crate::io::write_ivecs(path, self.k, &data)
    }

    pub fn read_ivecs(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (k, data) = crate::io::read_ivecs(path)?;
        if data.iter().any(|&i| i < 0) {
            return Err(crate::Error::Format("negative id in ground truth".into()));
        }
        Self::from_ids(k, data.into_iter().map(|i| i as u32).collect())
    }
}

/// Exact scan: for every query the `k` closest dataset ids.
pub fn brute_force_knn(dataset: &VectorDataset, queries: &VectorDataset, k: usize) -> Result<GroundTruth> {
    if k == 0 || k > dataset.len() {
        return Err(usage!("k={k} must be in 1..={}", dataset.len()));
    }
    if queries.dim() != dataset.dim() {
        return Err(usage!("query dimension {} != dataset dimension {}", queries.dim(), dataset.dim()));
    }
    let rows: Vec<Vec<NeighborEntry>> = (0..queries.len())
        .into_par_iter()
        .map(|q| top_k_scan(dataset, queries.vector(q), k, None))
        .collect();
    Ok(collect_truth(k, rows))
}

/// Exact k-NN of every dataset point among the others (self excluded).
pub fn brute_force_self_knn(dataset: &VectorDataset, k: usize) -> Result<GroundTruth> {
    if k == 0 || k >= dataset.len() {
        return Err(usage!("k={k} must be in 1..{}", dataset.len()));
    }
    let rows: Vec<Vec<NeighborEntry>> = (0..dataset.len())
        .into_par_iter()
        .map(|v| top_k_scan(dataset, dataset.vector(v), k, Some(v as u32)))
        .collect();
    Ok(collect_truth(k, rows))
}

fn collect_truth(k: usize, rows: Vec<Vec<NeighborEntry>>) -> GroundTruth {
    let mut ids = Vec::with_capacity(rows.len() * k);
    let mut dists = Vec::with_capacity(rows.len() * k);
    for row in rows {
        ids.extend(row.iter().map(|e| e.id));
        dists.extend(row.iter().map(|e| e.dist));
    }
    GroundTruth { k, ids, dists }
}

fn top_k_scan(dataset: &VectorDataset, query: &[f32], k: usize, skip: Option<u32>) -> Vec<NeighborEntry> {
    // Bounded sorted buffer; k is small relative to n.
    let mut best: Vec<NeighborEntry> = Vec::with_capacity(k + 1);
    for i in 0..dataset.len() {
        let id = i as u32;
        if Some(id) == skip {
            continue;
        }
        let e = NeighborEntry::new(id, dataset.dist_to(i, query));
        if best.len() == k && e.order(&best[k - 1]).is_ge() {
            continue;
        }
        let pos = best.partition_point(|b| b.order(&e).is_lt());
        best.insert(pos, e);
        best.truncate(k);
    }
    best
}

/// Mean over rows of `|found ∩ truth[..k]| / k`.
pub fn recall_at(found: &[Vec<u32>], truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 || truth.k() < k {
        return Err(usage!("ground truth has {} ids per row, need {k}", truth.k()));
    }
    if found.len() != truth.len() {
        return Err(usage!("{} result rows vs {} ground-truth rows", found.len(), truth.len()));
    }
    if found.is_empty() {
        return Ok(1.0);
    }
    let total: usize = found
        .iter()
        .enumerate()
        .map(|(q, row)| {
            let want = &truth.ids(q)[..k];
            row.iter().take(k).filter(|id| want.contains(id)).count()
        })
        .sum();
    Ok(total as f64 / (found.len() * k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub beam: usize,
    pub recall: f64,
    pub qps: f64,
}

/// Searches every query one at a time on the calling thread and reports
/// recall@topk and queries per second of the search loop alone.
pub fn evaluate(
    graph: &KnnGraph,
    dataset: &VectorDataset,
    queries: &VectorDataset,
    truth: &GroundTruth,
    params: &SearchParams,
) -> Result<Evaluation> {
    params.validate()?;
    if truth.len() != queries.len() {
        return Err(usage!("{} queries but {} ground-truth rows", queries.len(), truth.len()));
    }
    if truth.k() < params.topk {
        return Err(usage!("ground truth covers {} < topk {}", truth.k(), params.topk));
    }
    let mut results = Vec::with_capacity(queries.len());
    let started = Instant::now();
    for q in 0..queries.len() {
        results.push(greedy_search(graph, dataset, queries.vector(q), params)?.ids);
    }
    let elapsed = started.elapsed().as_secs_f64();
    let recall = recall_at(&results, truth, params.topk)?;
    Ok(Evaluation {
        beam: params.beam,
        recall,
        qps: queries.len() as f64 / elapsed.max(1e-9),
    })
}

/// Runs [`evaluate`] for each beam width.
pub fn sweep(
    graph: &KnnGraph,
    dataset: &VectorDataset,
    queries: &VectorDataset,
    truth: &GroundTruth,
    topk: usize,
    beams: &[usize],
) -> Result<Vec<Evaluation>> {
    beams
        .iter()
        .map(|&beam| evaluate(graph, dataset, queries, truth, &SearchParams::new(beam, topk)))
        .collect()
}

/// CSV with header `L,recall,qps`.
pub fn write_eval_csv<W: Write>(mut w: W, rows: &[Evaluation]) -> Result<()> {
    writeln!(w, "L,recall,qps")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.2}", r.beam, r.recall, r.qps)?;
    }
    Ok(())
}
