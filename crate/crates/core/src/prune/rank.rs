//! Rank-based (detourable route) pruning.

use crate::error::{usage, Result};
use crate::neighbor::KnnGraph;

/// Work partition for detour counting over a list of `k` candidates.
///
/// Counting for the candidate at rank `p` scans the `p - 1` closer
/// neighbors. Pairing rank `p` with rank `k + 2 - p` makes every pair cost
/// `k` scans; rank 1 has no closer neighbor and stands alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedPairs {
    pub singleton: usize,
    /// `(p, k + 2 - p)` with `p <= k + 2 - p`; `(p, p)` when they meet.
    pub pairs: Vec<(usize, usize)>,
}

impl BalancedPairs {
    /// Scans needed for rank `p`.
    pub fn work(p: usize) -> usize {
        p.saturating_sub(1)
    }

    /// Scan count of a pair. A self-pair is one candidate split across the
    /// two lanes, so it is charged to both.
    pub fn pair_work(pair: (usize, usize)) -> usize {
        if pair.0 == pair.1 {
            2 * Self::work(pair.0)
        } else {
            Self::work(pair.0) + Self::work(pair.1)
        }
    }

    /// Every rank in scheduling order, each exactly once.
    pub fn ranks(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.singleton).chain(self.pairs.iter().flat_map(|&(a, b)| {
            std::iter::once(a).chain((a != b).then_some(b))
        }))
    }
}

pub fn balanced_pairs(k: usize) -> Result<BalancedPairs> {
    if k < 2 {
        return Err(usage!("balanced pairing needs k >= 2, got {k}"));
    }
    let pairs = (2..=k)
        .map(|p| (p, k + 2 - p))
        .take_while(|&(p, q)| p <= q)
        .collect();
    Ok(BalancedPairs {
        singleton: 1,
        pairs,
    })
}

/// For each 1-indexed rank `r` in `G[node]`, the number of closer neighbors
/// `p_k` (rank below `r`) whose own list holds the rank-`r` neighbor at a
/// position below `r`. Index 0 of the result is rank 1.
pub fn count_detours(graph: &KnnGraph, node: usize) -> Result<Vec<u32>> {
    if node >= graph.len() {
        return Err(usage!("node {node} out of range for {} nodes", graph.len()));
    }
    let list = graph.list(node).entries();
    let k = list.len();
    let mut counts = vec![0u32; k];
    if k < 2 {
        return Ok(counts);
    }
    let schedule = balanced_pairs(k)?;
    for rank in schedule.ranks() {
        let target = list[rank - 1].id;
        let mut c = 0;
        for via in &list[..rank - 1] {
            let via_list = graph.list(via.id as usize).entries();
            // Position in via's list must also be below `rank`.
            let limit = (rank - 1).min(via_list.len());
            if via_list[..limit].iter().any(|e| e.id == target) {
                c += 1;
            }
        }
        counts[rank - 1] = c;
    }
    Ok(counts)
}

/// Zero-based positions of the `degree` entries with the fewest detours,
/// ties broken by smaller rank. Returned in selection order.
pub fn select_by_detours(counts: &[u32], degree: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (counts[i], i));
    order.truncate(degree);
    order
}

/// Keeps the `degree` neighbors of `node` with the fewest detourable routes.
pub fn filter_rank(graph: &KnnGraph, node: usize, degree: usize) -> Result<Vec<u32>> {
    let counts = count_detours(graph, node)?;
    let list = graph.list(node).entries();
    Ok(select_by_detours(&counts, degree)
        .into_iter()
        .map(|i| list[i].id)
        .collect())
}
