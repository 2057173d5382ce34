//! Out-of-core construction: per-cluster local indexes are built in
//! dispatch order and merged into one global index while at most
//! `n_cache` local indexes stay in memory.
//!
//! Building and merging run as two stages joined by a bounded queue, so
//! the next cluster is built while the previous one is merged. Output is
//! independent of timing and equals [`build_out_of_core_sequential`].

mod dispatch;
mod merge;

use std::io::Write;
use std::path::PathBuf;

use crossbeam_channel::bounded;
use serde::Serialize;

pub use dispatch::{plan_dispatch, simulate_cache, CacheCounts, DispatchOrder, DispatchStep};
pub use merge::{DiskStore, LocalIndex, MergeState, MergeStats, NeiLoc};

use crate::dataset::VectorDataset;
use crate::descent::{run_descent, DescentParams};
use crate::error::{usage, Error, Result};
use crate::neighbor::{KnnGraph, NeighborEntry, NeighborList};
use crate::partition::ClusterAssignment;
use crate::prune::{prune_graph, PruneConfig};
use crate::search::brute_force_self_knn;

pub const DEFAULT_QUEUE_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct OocConfig {
    /// Local indexes kept in memory at once.
    pub n_cache: usize,
    /// Final degree of the global index.
    pub degree: usize,
    /// Per-cluster descent; the seed is offset by the cluster id.
    pub descent: DescentParams,
    /// Per-cluster pruning, with `degree` forced to the global degree.
    pub prune: PruneConfig,
    /// Parent of the temporary spill directory; system temp if unset.
    pub scratch: Option<PathBuf>,
    pub queue_depth: usize,
}

impl OocConfig {
    pub fn new(n_cache: usize, degree: usize, descent: DescentParams, prune: PruneConfig) -> Self {
        Self {
            n_cache,
            degree,
            descent,
            prune: PruneConfig { degree, ..prune },
            scratch: None,
            queue_depth: DEFAULT_QUEUE_DEPTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cache == 0 {
            return Err(usage!("cache capacity must be at least 1"));
        }
        if self.queue_depth == 0 {
            return Err(usage!("queue depth must be at least 1"));
        }
        if self.prune.degree != self.degree {
            return Err(usage!(
                "prune degree {} differs from global degree {}",
                self.prune.degree,
                self.degree
            ));
        }
        self.descent.validate()?;
        self.prune.validate()
    }
}

/// Builds the pruned graph of one cluster, with global ids.
///
/// Clusters too small for descent (at most `k + 1` members) use an exact
/// k-NN graph instead.
pub fn build_local_index(
    dataset: &VectorDataset,
    members: &[u32],
    cluster: u32,
    config: &OocConfig,
) -> Result<LocalIndex> {
    let sub = dataset.subset(members)?;
    let k = config.descent.k;
    let knn = if members.len() <= k + 1 {
        exact_knn(&sub, k)?
    } else {
        let params = DescentParams {
            seed: config.descent.seed.wrapping_add(cluster as u64),
            ..config.descent
        };
        run_descent(&sub, &params)?.0
    };
    let pruned = prune_graph(&knn, &sub, &config.prune)?;
    let lists = pruned
        .into_lists()
        .into_iter()
        .map(|l| {
            NeighborList::from_entries(
                config.degree,
                l.entries()
                    .iter()
                    .map(|e| NeighborEntry::old(members[e.id as usize], e.dist)),
            )
        })
        .collect();
    Ok(LocalIndex {
        cluster,
        nodes: members.to_vec(),
        lists,
    })
}

fn exact_knn(ds: &VectorDataset, k: usize) -> Result<KnnGraph> {
    let kk = k.min(ds.len() - 1);
    let mut lists = Vec::with_capacity(ds.len());
    if kk == 0 {
        lists.resize(ds.len(), NeighborList::new(k));
    } else {
        let gt = brute_force_self_knn(ds, kk)?;
        for i in 0..ds.len() {
            lists.push(NeighborList::from_entries(
                k,
                gt.ids(i)
                    .iter()
                    .zip(gt.dists(i))
                    .map(|(&id, &d)| NeighborEntry::old(id, d)),
            ));
        }
    }
    let mut g = KnnGraph::from_lists(k, lists)?;
    g.set_entry(Some(ds.medoid()));
    Ok(g)
}

/// Cumulative counters after one dispatch step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub load: u32,
    pub evict: Option<u32>,
    #[serde(flatten)]
    pub stats: MergeStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OocOutput {
    pub graph: KnnGraph,
    pub stats: MergeStats,
    pub steps: Vec<StepRecord>,
}

impl OocOutput {
    /// One JSON object per step, then the totals.
    pub fn write_stats_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let json = |e: serde_json::Error| Error::Io(e.into());
        for s in &self.steps {
            serde_json::to_writer(&mut w, s).map_err(json)?;
            writeln!(w)?;
        }
        serde_json::to_writer(&mut w, &self.stats).map_err(json)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn check_inputs(
    dataset: &VectorDataset,
    assignment: &ClusterAssignment,
    order: &DispatchOrder,
    config: &OocConfig,
) -> Result<()> {
    config.validate()?;
    if assignment.num_nodes() != dataset.len() {
        return Err(usage!(
            "assignment covers {} nodes, dataset has {}",
            assignment.num_nodes(),
            dataset.len()
        ));
    }
    order.validate(assignment.num_clusters(), config.n_cache)
}

struct Merger {
    state: MergeState,
    steps: Vec<StepRecord>,
}

impl Merger {
    fn new(n: usize, config: &OocConfig) -> Result<Self> {
        Ok(Self {
            state: MergeState::new(n, config.degree, config.scratch.as_deref())?,
            steps: Vec::new(),
        })
    }

    fn apply(&mut self, step: DispatchStep, li: LocalIndex) -> Result<()> {
        debug_assert_eq!(step.load, li.cluster);
        if let Some(e) = step.evict {
            self.state.evict_cluster(e)?;
        }
        self.state.merge_local_index(li)?;
        #[cfg(debug_assertions)]
        self.state.check_registry()?;
        self.steps.push(StepRecord {
            step: self.steps.len(),
            load: step.load,
            evict: step.evict,
            stats: self.state.stats(),
        });
        log::debug!("merged cluster {} (evicted {:?})", step.load, step.evict);
        Ok(())
    }

    fn finish(self, dataset: &VectorDataset) -> Result<OocOutput> {
        let stats = self.state.stats();
        let mut graph = self.state.into_graph()?;
        graph.set_entry(Some(dataset.medoid()));
        Ok(OocOutput {
            graph,
            stats,
            steps: self.steps,
        })
    }
}

/// Builder and merger in two threads with a bounded handoff queue.
pub fn build_out_of_core(
    dataset: &VectorDataset,
    assignment: &ClusterAssignment,
    order: &DispatchOrder,
    config: &OocConfig,
) -> Result<OocOutput> {
    check_inputs(dataset, assignment, order, config)?;
    let mut merger = Merger::new(dataset.len(), config)?;
    let (tx, rx) = bounded::<Result<LocalIndex>>(config.queue_depth);

    std::thread::scope(|s| {
        s.spawn(move || {
            for step in order.steps() {
                let members = assignment.members(step.load as usize);
                let built = build_local_index(dataset, members, step.load, config);
                let failed = built.is_err();
                // The merger hung up after an error: stop building.
                if tx.send(built).is_err() || failed {
                    break;
                }
            }
        });
        for step in order.steps() {
            let li = rx
                .recv()
                .map_err(|_| usage!("builder stopped before cluster {}", step.load))??;
            merger.apply(*step, li)?;
        }
        Ok::<_, Error>(())
    })?;
    merger.finish(dataset)
}

/// Reference: builds and merges one cluster at a time on this thread.
pub fn build_out_of_core_sequential(
    dataset: &VectorDataset,
    assignment: &ClusterAssignment,
    order: &DispatchOrder,
    config: &OocConfig,
) -> Result<OocOutput> {
    check_inputs(dataset, assignment, order, config)?;
    let mut merger = Merger::new(dataset.len(), config)?;
    for step in order.steps() {
        let li = build_local_index(dataset, assignment.members(step.load as usize), step.load, config)?;
        merger.apply(*step, li)?;
    }
    merger.finish(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{assign_overlap, build_cluster_graph, kmeans};
    use crate::synth;

    fn small_config(n_cache: usize) -> OocConfig {
        let descent = DescentParams {
            k: 12,
            it1: 3,
            it2: 2,
            sample: 8,
            top_m: 4,
            ..Default::default()
        };
        OocConfig::new(n_cache, 8, descent, PruneConfig::vamana(8, 1.2))
    }

    #[test]
    fn single_cluster_equals_in_memory_build() {
        let ds = synth::gaussian_mixture(300, 6, 3, 1.0, 5);
        let a = ClusterAssignment::from_node_clusters(1, 1, vec![0; 300]).unwrap();
        let cfg = small_config(1);
        let out = build_out_of_core(&ds, &a, &DispatchOrder::sequential(1, 1), &cfg).unwrap();
        let (knn, _) = run_descent(&ds, &cfg.descent).unwrap();
        let pruned = prune_graph(&knn, &ds, &cfg.prune).unwrap();
        assert_eq!(out.graph, pruned);
        assert_eq!(out.stats.cache_hits + out.stats.cache_misses, 0);
    }

    #[test]
    fn pipeline_matches_sequential_and_simulator() {
        let ds = synth::gaussian_mixture(800, 6, 6, 1.0, 9);
        let cents = kmeans(&ds, 6, 10, 1).unwrap();
        let a = assign_overlap(&ds, &cents, 2).unwrap();
        let order = plan_dispatch(&build_cluster_graph(&a), 2).unwrap();
        let cfg = small_config(2);
        let par = build_out_of_core(&ds, &a, &order, &cfg).unwrap();
        let seq = build_out_of_core_sequential(&ds, &a, &order, &cfg).unwrap();
        assert_eq!(par, seq);
        par.graph.validate().unwrap();
        assert!(par.graph.max_degree() <= 8);

        let sim = simulate_cache(&a, &order, 2).unwrap();
        assert_eq!((par.stats.cache_hits, par.stats.cache_misses), (sim.hits, sim.misses));
        assert_eq!(par.stats.cache_hits + par.stats.cache_misses, 800);
        assert_eq!(par.stats.disk_reads, par.stats.cache_misses);
        assert_eq!(par.steps.len(), 6);

        let mut jsonl = Vec::new();
        par.write_stats_jsonl(&mut jsonl).unwrap();
        let text = String::from_utf8(jsonl).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().next().unwrap().contains("\"cache_hits\""));
    }

    #[test]
    fn tiny_clusters_use_exact_graphs() {
        let ds = synth::uniform(20, 3, 2);
        // Clusters of 1, 5 and 14 members.
        let flat: Vec<u32> = (0..20).map(|i| if i == 0 { 0 } else if i < 6 { 1 } else { 2 }).collect();
        let a = ClusterAssignment::from_node_clusters(3, 1, flat).unwrap();
        let cfg = small_config(1);
        let out = build_out_of_core(&ds, &a, &DispatchOrder::sequential(3, 1), &cfg).unwrap();
        assert!(out.graph.list(0).is_empty());
        out.graph.validate().unwrap();
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let ds = synth::uniform(20, 3, 2);
        let a = ClusterAssignment::from_node_clusters(2, 1, [0, 1].repeat(10)).unwrap();
        let cfg = small_config(1);
        assert!(build_out_of_core(&ds, &a, &DispatchOrder::sequential(2, 2), &cfg).is_err());
        let short = ClusterAssignment::from_node_clusters(2, 1, vec![0, 1]).unwrap();
        assert!(build_out_of_core(&ds, &short, &DispatchOrder::sequential(2, 1), &cfg).is_err());
        let mut bad = cfg.clone();
        bad.prune.degree = 4;
        assert!(build_out_of_core(&ds, &a, &DispatchOrder::sequential(2, 1), &bad).is_err());
    }
}
