//! Collect / Filter / Store pruning of a k-NN graph.
//!
//! Every node independently collects candidates (its 1-hop list, its 2-hop
//! neighborhood, or the nodes expanded while searching for it), filters
//! them with a distance, angle or rank rule, and stores the survivors as
//! its new list. The presets map the common refinement-based indexes onto
//! this pipeline:
//!
//! | preset  | collect | filter            |
//! |---------|---------|-------------------|
//! | NSG     | path    | dist, alpha = 1   |
//! | Vamana  | path    | dist, alpha > 1   |
//! | NSSG    | 2-hop   | angle, gamma = 60 |
//! | DPG     | 1-hop   | angle, gamma = 0  |
//! | CAGRA   | 1-hop   | rank              |

mod filter;
mod rank;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

pub use filter::{serial_filter, wavefront_filter, FilterRule};
pub use rank::{balanced_pairs, count_detours, filter_rank, select_by_detours, BalancedPairs};

use crate::dataset::VectorDataset;
use crate::error::{usage, Error, Result};
use crate::neighbor::{KnnGraph, NeighborEntry, NeighborList};
use crate::search::search_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollectMode {
    OneHop,
    TwoHop,
    Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterMetric {
    Dist,
    Angle,
    Rank,
}

impl FromStr for CollectMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1-hop" | "onehop" | "one-hop" | "1hop" => Ok(CollectMode::OneHop),
            "2-hop" | "twohop" | "two-hop" | "2hop" => Ok(CollectMode::TwoHop),
            "path" => Ok(CollectMode::Path),
            other => Err(usage!("unknown collect mode {other:?}")),
        }
    }
}

impl fmt::Display for CollectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CollectMode::OneHop => "1-hop",
            CollectMode::TwoHop => "2-hop",
            CollectMode::Path => "path",
        })
    }
}

impl FromStr for FilterMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dist" => Ok(FilterMetric::Dist),
            "angle" => Ok(FilterMetric::Angle),
            "rank" => Ok(FilterMetric::Rank),
            other => Err(usage!("unknown filter metric {other:?}")),
        }
    }
}

impl fmt::Display for FilterMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMetric::Dist => "dist",
            FilterMetric::Angle => "angle",
            FilterMetric::Rank => "rank",
        })
    }
}

/// Angle threshold used when none is given.
pub const DEFAULT_GAMMA: f32 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub mode: CollectMode,
    pub metric: FilterMetric,
    /// `alpha` for [`FilterMetric::Dist`], `gamma` in degrees for
    /// [`FilterMetric::Angle`], ignored for [`FilterMetric::Rank`].
    pub thres: f32,
    pub cand_size: usize,
    pub degree: usize,
    /// Search pool width for [`CollectMode::Path`].
    pub beam: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self::vamana(32, 1.2)
    }
}

impl PruneConfig {
    pub fn nsg(degree: usize) -> Self {
        Self::vamana(degree, 1.0)
    }

    pub fn vamana(degree: usize, alpha: f32) -> Self {
        Self {
            mode: CollectMode::Path,
            metric: FilterMetric::Dist,
            thres: alpha,
            cand_size: 4 * degree,
            degree,
            beam: 2 * degree,
        }
    }

    pub fn nssg(degree: usize, gamma: f32) -> Self {
        Self {
            mode: CollectMode::TwoHop,
            metric: FilterMetric::Angle,
            thres: gamma,
            cand_size: 4 * degree,
            degree,
            beam: degree,
        }
    }

    pub fn dpg(degree: usize) -> Self {
        Self {
            mode: CollectMode::OneHop,
            ..Self::nssg(degree, 0.0)
        }
    }

    pub fn cagra(degree: usize) -> Self {
        Self {
            mode: CollectMode::OneHop,
            metric: FilterMetric::Rank,
            thres: 0.0,
            cand_size: degree,
            degree,
            beam: degree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(usage!("out-degree must be at least 1"));
        }
        if self.cand_size < self.degree {
            return Err(usage!(
                "cand_size {} smaller than degree {}",
                self.cand_size,
                self.degree
            ));
        }
        if self.mode == CollectMode::Path && self.beam < self.degree {
            return Err(usage!("beam {} smaller than degree {}", self.beam, self.degree));
        }
        match self.metric {
            FilterMetric::Dist if self.thres.is_nan() || self.thres < 1.0 => {
                Err(usage!("alpha must be >= 1, got {}", self.thres))
            }
            FilterMetric::Angle if !(0.0..=180.0).contains(&self.thres) => {
                Err(usage!("gamma must be within [0, 180] degrees, got {}", self.thres))
            }
            FilterMetric::Rank if self.mode != CollectMode::OneHop => {
                Err(usage!("rank filtering works on 1-hop lists only"))
            }
            _ => Ok(()),
        }
    }

    pub fn rule(&self) -> Option<FilterRule> {
        match self.metric {
            FilterMetric::Dist => Some(FilterRule::Dist { alpha: self.thres }),
            FilterMetric::Angle => Some(FilterRule::Angle { gamma: self.thres }),
            FilterMetric::Rank => None,
        }
    }

    /// Parses whitespace- or newline-separated `key=value` pairs on top of
    /// the defaults. Keys: `mode`, `metric`, `thres`, `cand_size`,
    /// `degree`, `beam`. `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut thres_given = false;
        for token in text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
        {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| usage!("expected key=value, found {token:?}"))?;
            let num = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| usage!("{key}: not an integer: {v:?}"))
            };
            match key {
                "mode" => cfg.mode = value.parse()?,
                "metric" => cfg.metric = value.parse()?,
                "thres" => {
                    cfg.thres = value
                        .parse()
                        .map_err(|_| usage!("thres: not a number: {value:?}"))?;
                    thres_given = true;
                }
                "cand_size" | "cand" => cfg.cand_size = num(value)?,
                "degree" => cfg.degree = num(value)?,
                "beam" => cfg.beam = num(value)?,
                other => return Err(usage!("unknown prune config key {other:?}")),
            }
        }
        if !thres_given && cfg.metric == FilterMetric::Angle {
            cfg.thres = DEFAULT_GAMMA;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for PruneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mode={} metric={} thres={} cand_size={} degree={} beam={}",
            self.mode, self.metric, self.thres, self.cand_size, self.degree, self.beam
        )
    }
}

/// Candidates for one node: ascending `(dist, id)`, owner excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub owner: u32,
    pub entries: Vec<NeighborEntry>,
}

impl CandidateSet {
    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

/// Gathers candidates for `node`. Path mode searches from `entry`.
pub fn collect(
    graph: &KnnGraph,
    dataset: &VectorDataset,
    node: usize,
    config: &PruneConfig,
    entry: u32,
) -> Result<CandidateSet> {
    if node >= graph.len() {
        return Err(usage!("node {node} out of range for {} nodes", graph.len()));
    }
    let owner = node as u32;
    let mut ids: Vec<u32> = match config.mode {
        CollectMode::OneHop => graph.list(node).ids().collect(),
        CollectMode::TwoHop => {
            let first = graph.list(node);
            first
                .ids()
                .chain(first.ids().flat_map(|u| graph.list(u as usize).ids()))
                .collect()
        }
        CollectMode::Path => {
            search_from(graph, dataset, dataset.vector(node), entry, config.beam, 1).visited
        }
    };
    ids.sort_unstable();
    ids.dedup();
    let mut entries: Vec<NeighborEntry> = ids
        .into_iter()
        .filter(|&id| id != owner)
        .map(|id| NeighborEntry::new(id, dataset.dist(node, id as usize)))
        .collect();
    entries.sort_by(NeighborEntry::order);
    entries.truncate(config.cand_size);
    Ok(CandidateSet { owner, entries })
}

/// Prunes every node's list; the input graph is left untouched. The
/// output has degree `config.degree` and keeps the input's entry point (or
/// the dataset medoid).
pub fn prune_graph(graph: &KnnGraph, dataset: &VectorDataset, config: &PruneConfig) -> Result<KnnGraph> {
    config.validate()?;
    if graph.len() != dataset.len() {
        return Err(usage!("graph has {} nodes, dataset {}", graph.len(), dataset.len()));
    }
    let entry = graph.entry().unwrap_or_else(|| dataset.medoid());
    let lists: Vec<NeighborList> = (0..graph.len())
        .into_par_iter()
        .map(|node| prune_node(graph, dataset, node, config, entry))
        .collect::<Result<_>>()?;
    let mut out = KnnGraph::from_lists_unchecked(config.degree, lists);
    out.set_entry(Some(entry));
    Ok(out)
}

/// The Filter and Store steps for a single node.
pub fn prune_node(
    graph: &KnnGraph,
    dataset: &VectorDataset,
    node: usize,
    config: &PruneConfig,
    entry: u32,
) -> Result<NeighborList> {
    let kept: Vec<u32> = match config.rule() {
        None => filter_rank(graph, node, config.degree)?,
        Some(rule) => {
            let cands = collect(graph, dataset, node, config, entry)?;
            wavefront_filter(cands.owner, &cands.entries, rule, config.degree, dataset)
        }
    };
    Ok(NeighborList::from_entries(
        config.degree,
        kept.into_iter()
            .map(|id| NeighborEntry::old(id, dataset.dist(node, id as usize))),
    ))
}

#[cfg(test)]
mod tests;
