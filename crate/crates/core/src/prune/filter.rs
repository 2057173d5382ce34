//! Serial and wavefront candidate filtering for the distance and angle rules.

use crate::dataset::{angle_between, VectorDataset};
use crate::neighbor::NeighborEntry;

/// Pairwise occlusion rule applied between a kept neighbor and a candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterRule {
    /// Candidate `c` survives kept `r` iff `dis(p, c) < alpha * dis(r, c)`.
    Dist { alpha: f32 },
    /// Candidate `c` survives kept `r` iff the angle at `p` between
    /// `r - p` and `c - p` exceeds `gamma` degrees.
    Angle { gamma: f32 },
}

impl FilterRule {
    /// Whether `cand` survives against the already kept `kept`, both seen
    /// from `owner`. Coincident points have no defined angle and are never
    /// treated as occluding.
    #[inline]
    pub fn survives(&self, dataset: &VectorDataset, owner: u32, kept: &NeighborEntry, cand: &NeighborEntry) -> bool {
        match *self {
            FilterRule::Dist { alpha } => {
                cand.dist < alpha * dataset.dist(kept.id as usize, cand.id as usize)
            }
            FilterRule::Angle { gamma } => match angle_between(
                dataset.vector(owner as usize),
                dataset.vector(kept.id as usize),
                dataset.vector(cand.id as usize),
            ) {
                Ok(angle) => angle > gamma,
                Err(_) => true,
            },
        }
    }
}

/// Reference filter: scan candidates in ascending order and keep each one
/// that survives every neighbor kept so far, until `degree` are kept.
pub fn serial_filter(
    owner: u32,
    cands: &[NeighborEntry],
    rule: FilterRule,
    degree: usize,
    dataset: &VectorDataset,
) -> Vec<u32> {
    let mut kept: Vec<NeighborEntry> = Vec::with_capacity(degree);
    for c in cands {
        if kept.len() >= degree {
            break;
        }
        if kept.iter().all(|r| rule.survives(dataset, owner, r, c)) {
            kept.push(*c);
        }
    }
    kept.into_iter().map(|e| e.id).collect()
}

/// Round-based filter: every round tests all remaining candidates against
/// the most recently kept neighbor only, drops the failures, then keeps the
/// closest survivor. Candidates behind the newest kept neighbor were already
/// checked against all earlier ones, so the output equals [`serial_filter`].
pub fn wavefront_filter(
    owner: u32,
    cands: &[NeighborEntry],
    rule: FilterRule,
    degree: usize,
    dataset: &VectorDataset,
) -> Vec<u32> {
    wavefront_rounds(owner, cands, rule, degree, dataset, |_, _| {})
}

/// Like [`wavefront_filter`], reporting `(round, surviving ids)` after each
/// round's removals.
pub(crate) fn wavefront_rounds(
    owner: u32,
    cands: &[NeighborEntry],
    rule: FilterRule,
    degree: usize,
    dataset: &VectorDataset,
    mut on_round: impl FnMut(usize, &[NeighborEntry]),
) -> Vec<u32> {
    let Some((first, rest)) = cands.split_first() else {
        return Vec::new();
    };
    if degree == 0 {
        return Vec::new();
    }
    let mut kept = vec![first.id];
    let mut newest = *first;
    let mut front: Vec<NeighborEntry> = rest.to_vec();
    let mut round = 0;
    while kept.len() < degree && !front.is_empty() {
        round += 1;
        front.retain(|c| rule.survives(dataset, owner, &newest, c));
        on_round(round, &front);
        if front.is_empty() {
            break;
        }
        newest = front.remove(0);
        kept.push(newest.id);
    }
    kept
}
