//! Two-phase NN-Descent.
//!
//! Phase 1 runs classic local joins over shared samples of each node's
//! new and old neighbors. Phase 2 switches to per-node sampling: every node
//! pulls the neighbor lists of its closest `top_m` not-yet-expanded
//! neighbors and keeps the candidates that beat its current k-th distance.
//!
//! Both phases compute against a snapshot of the graph taken at the start
//! of the iteration and apply updates in node order, so results do not
//! depend on how many worker threads run.

use std::fmt;
use std::io::Write;

use rand::seq::{index, IteratorRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::VectorDataset;
use crate::error::{usage, Result};
use crate::neighbor::{count_changed, merge_into, Flag, KnnGraph, NeighborEntry, NeighborList};
use crate::search::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescentParams {
    /// Graph degree.
    pub k: usize,
    /// Phase-1 (shared sampling) iterations.
    pub it1: usize,
    /// Phase-2 (per-node sampling) iterations.
    pub it2: usize,
    /// Per-flag sample size in phase 1.
    pub sample: usize,
    /// Number of closest unexpanded neighbors whose lists phase 2 pulls.
    pub top_m: usize,
    /// Lane-group width: in phase 1 each node keeps only the closest
    /// partner out of every `group` consecutive join partners.
    pub group: usize,
    pub seed: u64,
}

impl Default for DescentParams {
    fn default() -> Self {
        Self {
            k: 32,
            it1: 4,
            it2: 4,
            sample: 16,
            top_m: 8,
            group: 4,
            seed: 0,
        }
    }
}

impl DescentParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(usage!("k must be at least 2, got {}", self.k));
        }
        if self.sample == 0 || self.sample > self.k {
            return Err(usage!("sample size must be in 1..={}, got {}", self.k, self.sample));
        }
        if self.top_m == 0 || self.top_m > self.k {
            return Err(usage!("top_m must be in 1..={}, got {}", self.k, self.top_m));
        }
        if self.group == 0 {
            return Err(usage!("lane-group width must be at least 1"));
        }
        Ok(())
    }
}

/// Per-node record of what phase 2 already did for that node.
///
/// `expanded` holds neighbors whose lists were pulled into the pool,
/// `evaluated` holds pool candidates whose distance was computed. Both are
/// sorted for binary-search membership; the owner never appears.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VisitedSets {
    expanded: Vec<Vec<u32>>,
    evaluated: Vec<Vec<u32>>,
}

impl VisitedSets {
    pub fn new(n: usize) -> Self {
        Self {
            expanded: vec![Vec::new(); n],
            evaluated: vec![Vec::new(); n],
        }
    }

    pub fn expanded(&self, node: usize) -> &[u32] {
        &self.expanded[node]
    }

    pub fn evaluated(&self, node: usize) -> &[u32] {
        &self.evaluated[node]
    }

    /// True if `id` was expanded for or evaluated against `node`.
    pub fn contains(&self, node: usize, id: u32) -> bool {
        self.expanded[node].binary_search(&id).is_ok()
            || self.evaluated[node].binary_search(&id).is_ok()
    }

    /// Marks `ids` as expanded for `node`.
    pub fn mark_expanded(&mut self, node: usize, ids: &[u32]) {
        insert_sorted(&mut self.expanded[node], ids);
    }
}

fn insert_sorted(set: &mut Vec<u32>, ids: &[u32]) {
    set.extend_from_slice(ids);
    set.sort_unstable();
    set.dedup();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Shared,
    PerNode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Shared => "1",
            Phase::PerNode => "2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    /// Global iteration index, counting both phases.
    pub iteration: usize,
    pub phase: Phase,
    pub updates: usize,
    pub recall: Option<f64>,
}

/// One record per executed iteration, in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    /// CSV with header `iteration,phase,updates,recall`; recall is empty
    /// when no ground truth was supplied.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,phase,updates,recall")?;
        for r in &self.records {
            match r.recall {
                Some(rc) => writeln!(w, "{},{},{},{:.6}", r.iteration, r.phase, r.updates, rc)?,
                None => writeln!(w, "{},{},{},", r.iteration, r.phase, r.updates)?,
            }
        }
        Ok(())
    }
}

/// Derives an independent generator for one `(stream, node)` pair.
fn node_rng(seed: u64, stream: u64, node: u64) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(stream ^ mix(node))))
}

const INIT_STREAM: u64 = u64::MAX;

/// Every node gets `k` distinct random non-self neighbors with true
/// distances, all flagged new.
pub fn init_random_graph(dataset: &VectorDataset, k: usize, seed: u64) -> Result<KnnGraph> {
    let n = dataset.len();
    if k == 0 || k >= n {
        return Err(usage!("random init needs 1 <= k < n (k={k}, n={n})"));
    }
    let lists: Vec<NeighborList> = (0..n)
        .into_par_iter()
        .map(|v| {
            let mut rng = node_rng(seed, INIT_STREAM, v as u64);
            let entries = index::sample(&mut rng, n - 1, k).into_iter().map(|x| {
                let id = if x >= v { x + 1 } else { x };
                NeighborEntry::new(id as u32, dataset.dist(v, id))
            });
            NeighborList::from_entries(k, entries)
        })
        .collect();
    Ok(KnnGraph::from_lists_unchecked(k, lists))
}

/// Up to `s` items chosen by reservoir sampling, returned in input order.
fn reservoir<I: Iterator<Item = u32>>(rng: &mut ChaCha8Rng, items: I, s: usize) -> Vec<u32> {
    let mut picked: Vec<(usize, u32)> = items.enumerate().choose_multiple(rng, s);
    picked.sort_unstable_by_key(|p| p.0);
    picked.into_iter().map(|p| p.1).collect()
}

struct JoinSample {
    new: Vec<u32>,
    old: Vec<u32>,
}

/// One shared-sampling local-join iteration. `round` only seeds sampling.
/// Returns the number of list entries that changed.
pub fn phase1_iteration(
    graph: &mut KnnGraph,
    dataset: &VectorDataset,
    params: &DescentParams,
    round: usize,
) -> usize {
    let n = graph.len();
    let s = params.sample;
    let stream = 2 * round as u64;

    // Forward samples; these are the entries flipped to old afterwards.
    let forward: Vec<JoinSample> = (0..n)
        .into_par_iter()
        .map(|v| {
            let mut rng = node_rng(params.seed, stream, v as u64);
            let list = graph.list(v).entries();
            let new = reservoir(&mut rng, list.iter().filter(|e| e.flag == Flag::New).map(|e| e.id), s);
            let old = reservoir(&mut rng, list.iter().filter(|e| e.flag == Flag::Old).map(|e| e.id), s);
            JoinSample { new, old }
        })
        .collect();

    // Reverse samples: v joins the sets of the nodes it sampled.
    let mut rev_new: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut rev_old: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (v, fs) in forward.iter().enumerate() {
        for &u in &fs.new {
            rev_new[u as usize].push(v as u32);
        }
        for &u in &fs.old {
            rev_old[u as usize].push(v as u32);
        }
    }
    let joins: Vec<JoinSample> = (0..n)
        .into_par_iter()
        .map(|v| {
            let mut rng = node_rng(params.seed, stream + 1, v as u64);
            let mut new = forward[v].new.clone();
            new.extend(reservoir(&mut rng, rev_new[v].iter().copied(), s));
            let mut old = forward[v].old.clone();
            old.extend(reservoir(&mut rng, rev_old[v].iter().copied(), s));
            dedup_keep_order(&mut new);
            // The owner joins as an old member so its new neighbors learn
            // the reverse edge.
            old.push(v as u32);
            dedup_keep_order(&mut old);
            old.retain(|id| !new.contains(id));
            JoinSample { new, old }
        })
        .collect();

    let snapshot: &KnnGraph = graph;
    let proposals: Vec<Vec<(u32, NeighborEntry)>> = joins
        .par_iter()
        .map(|j| local_join(snapshot, dataset, j, params.group))
        .collect();

    // Bucket proposals by target, preserving node order.
    let mut buckets: Vec<Vec<NeighborEntry>> = vec![Vec::new(); n];
    for (target, e) in proposals.into_iter().flatten() {
        buckets[target as usize].push(e);
    }

    let k = graph.k();
    let updated: Vec<(NeighborList, usize)> = graph
        .lists()
        .par_iter()
        .zip(buckets.par_iter())
        .zip(forward.par_iter())
        .map(|((before, cands), fs)| {
            let mut after = merge_into(before, cands, k);
            let changed = count_changed(before, &after);
            for e in after.entries_mut() {
                if e.flag == Flag::New && fs.new.contains(&e.id) {
                    e.flag = Flag::Old;
                }
            }
            (after, changed)
        })
        .collect();

    let mut total = 0;
    for (slot, (list, changed)) in graph.lists_mut().iter_mut().zip(updated) {
        *slot = list;
        total += changed;
    }
    total
}

fn dedup_keep_order(ids: &mut Vec<u32>) {
    let mut seen = Vec::with_capacity(ids.len());
    ids.retain(|id| {
        if seen.contains(id) {
            false
        } else {
            seen.push(*id);
            true
        }
    });
}

/// New-new and new-old pairs of one join set. For each participant the
/// partners are split into consecutive groups of `group`; only the closest
/// partner of every group is proposed to that participant.
fn local_join(
    graph: &KnnGraph,
    dataset: &VectorDataset,
    join: &JoinSample,
    group: usize,
) -> Vec<(u32, NeighborEntry)> {
    let nn = join.new.len();
    let members: Vec<u32> = join.new.iter().chain(&join.old).copied().collect();
    let m = members.len();
    if nn == 0 || m < 2 {
        return Vec::new();
    }
    // dists[i * m + j] for i a new member, j any member.
    let mut dists = vec![0f32; nn * m];
    for i in 0..nn {
        for j in (i + 1)..m {
            let d = dataset.dist(members[i] as usize, members[j] as usize);
            dists[i * m + j] = d;
            if j < nn {
                dists[j * m + i] = d;
            }
        }
    }
    let pair = |a: usize, b: usize| if a < nn { dists[a * m + b] } else { dists[b * m + a] };

    let mut out = Vec::new();
    let mut partners: Vec<usize> = Vec::with_capacity(m);
    for a in 0..m {
        partners.clear();
        if a < nn {
            partners.extend((0..m).filter(|&b| b != a));
        } else {
            partners.extend(0..nn);
        }
        let owner = members[a];
        let list = graph.list(owner as usize);
        for chunk in partners.chunks(group) {
            let best = chunk
                .iter()
                .map(|&b| NeighborEntry::new(members[b], pair(a, b)))
                .min_by(NeighborEntry::order)
                .expect("chunks are non-empty");
            if best.id != owner && list.admits(&best) {
                out.push((owner, best));
            }
        }
    }
    out
}

/// One per-node sampling iteration with non-revisitation.
pub fn phase2_iteration(
    graph: &mut KnnGraph,
    dataset: &VectorDataset,
    params: &DescentParams,
    visited: &mut VisitedSets,
) -> usize {
    phase2_with_probe(graph, dataset, params, visited, &|_, _| {})
}

/// `probe(v, c)` is called for every pool distance evaluated.
pub(crate) fn phase2_with_probe(
    graph: &mut KnnGraph,
    dataset: &VectorDataset,
    params: &DescentParams,
    visited: &mut VisitedSets,
    probe: &(dyn Fn(u32, u32) + Sync),
) -> usize {
    let k = graph.k();
    let snapshot: &KnnGraph = graph;
    let updated: Vec<(NeighborList, usize)> = visited
        .expanded
        .par_iter_mut()
        .zip(visited.evaluated.par_iter_mut())
        .enumerate()
        .map(|(v, (expanded, evaluated))| {
            let owner = v as u32;
            let list = snapshot.list(v);
            let top: Vec<u32> = list
                .ids()
                .filter(|id| expanded.binary_search(id).is_err())
                .take(params.top_m)
                .collect();
            if top.is_empty() {
                return (list.clone(), 0);
            }
            let mut pool: Vec<u32> = top
                .iter()
                .flat_map(|&u| snapshot.list(u as usize).ids())
                .collect();
            pool.sort_unstable();
            pool.dedup();
            insert_sorted(expanded, &top);

            let bound = list.worst().map(|w| w.dist);
            let mut fresh = Vec::new();
            let mut cands = Vec::new();
            for c in pool {
                if c == owner
                    || list.contains(c)
                    || expanded.binary_search(&c).is_ok()
                    || evaluated.binary_search(&c).is_ok()
                {
                    continue;
                }
                let d = dataset.dist(v, c as usize);
                probe(owner, c);
                fresh.push(c);
                if bound.is_none_or(|b| d < b) {
                    cands.push(NeighborEntry::new(c, d));
                }
            }
            insert_sorted(evaluated, &fresh);
            let after = merge_into(list, &cands, k);
            let changed = count_changed(list, &after);
            (after, changed)
        })
        .collect();

    let mut total = 0;
    for (slot, (list, changed)) in graph.lists_mut().iter_mut().zip(updated) {
        *slot = list;
        total += changed;
    }
    total
}

/// Random init, `it1` shared-sampling iterations, then `it2` per-node
/// iterations. Recall is traced per iteration when `truth` is given.
pub fn run_descent_traced(
    dataset: &VectorDataset,
    params: &DescentParams,
    truth: Option<&GroundTruth>,
) -> Result<(KnnGraph, ConvergenceTrace)> {
    params.validate()?;
    if let Some(t) = truth {
        if t.len() != dataset.len() {
            return Err(usage!("ground truth has {} rows for {} nodes", t.len(), dataset.len()));
        }
        if t.k() < params.k {
            return Err(usage!("ground truth has {} ids per row, need {}", t.k(), params.k));
        }
    }
    let mut graph = init_random_graph(dataset, params.k, params.seed)?;
    let mut trace = ConvergenceTrace::default();
    let record = |g: &KnnGraph| truth.map(|t| knn_recall(g, t).expect("checked above"));

    for it in 0..params.it1 {
        let updates = phase1_iteration(&mut graph, dataset, params, it);
        log::debug!("phase 1 iteration {it}: {updates} updates");
        trace.records.push(TraceRecord {
            iteration: it,
            phase: Phase::Shared,
            updates,
            recall: record(&graph),
        });
    }
    let mut visited = VisitedSets::new(dataset.len());
    for it in 0..params.it2 {
        let updates = phase2_iteration(&mut graph, dataset, params, &mut visited);
        log::debug!("phase 2 iteration {it}: {updates} updates");
        trace.records.push(TraceRecord {
            iteration: params.it1 + it,
            phase: Phase::PerNode,
            updates,
            recall: record(&graph),
        });
    }
    graph.set_entry(Some(dataset.medoid()));
    Ok((graph, trace))
}

pub fn run_descent(dataset: &VectorDataset, params: &DescentParams) -> Result<(KnnGraph, ConvergenceTrace)> {
    run_descent_traced(dataset, params, None)
}

/// Mean over nodes of `|list ids ∩ true top-k ids| / k`.
pub fn knn_recall(graph: &KnnGraph, truth: &GroundTruth) -> Result<f64> {
    let k = graph.k();
    if truth.k() < k {
        return Err(usage!("ground truth has {} ids per row, need {k}", truth.k()));
    }
    if truth.len() != graph.len() {
        return Err(usage!("ground truth has {} rows for {} nodes", truth.len(), graph.len()));
    }
    if graph.is_empty() {
        return Ok(1.0);
    }
    let hits: usize = (0..graph.len())
        .into_par_iter()
        .map(|v| {
            let want = &truth.ids(v)[..k];
            graph.list(v).ids().filter(|id| want.contains(id)).count()
        })
        .sum();
    Ok(hits as f64 / (graph.len() * k) as f64)
}
