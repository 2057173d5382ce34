use std::cmp::Ordering;

use crate::error::{usage, Result};

/// Whether an entry has already taken part in a local join.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    New,
    Old,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborEntry {
    pub id: u32,
    pub dist: f32,
    pub flag: Flag,
}

impl NeighborEntry {
    pub fn new(id: u32, dist: f32) -> Self {
        Self {
            id,
            dist,
            flag: Flag::New,
        }
    }

    pub fn old(id: u32, dist: f32) -> Self {
        Self {
            id,
            dist,
            flag: Flag::Old,
        }
    }

    /// Total order used everywhere: distance, then id.
    #[inline]
    pub fn order(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

/// Bounded neighbor list, sorted ascending by `(dist, id)` with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList {
    capacity: usize,
    entries: Vec<NeighborEntry>,
}

impl NeighborList {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    /// Builds a list from arbitrary entries: sorts, drops duplicate ids
    /// (keeping the closest) and truncates to `capacity`.
    pub fn from_entries(capacity: usize, entries: impl IntoIterator<Item = NeighborEntry>) -> Self {
        let cands: Vec<NeighborEntry> = entries.into_iter().collect();
        merge_into(&Self::new(capacity), &cands, capacity)
    }

    /// No invariant checks; callers validate afterwards.
    pub(crate) fn raw(capacity: usize, entries: Vec<NeighborEntry>) -> Self {
        Self { capacity, entries }
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    #[inline]
    pub fn entries(&self) -> &[NeighborEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [NeighborEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl ExactSizeIterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    /// Zero-based position of `id`, if present.
    pub fn position(&self, id: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// Largest stored distance, `None` for an empty list.
    pub fn max_dist(&self) -> Option<f32> {
        self.entries.last().map(|e| e.dist)
    }

    /// The entry a candidate has to beat to enter a full list.
    pub fn worst(&self) -> Option<&NeighborEntry> {
        if self.is_full() {
            self.entries.last()
        } else {
            None
        }
    }

    /// True when `cand` would survive a merge into this list as it stands.
    #[inline]
    pub fn admits(&self, cand: &NeighborEntry) -> bool {
        match self.worst() {
            Some(w) => cand.order(w) == Ordering::Less,
            None => true,
        }
    }

    pub fn into_entries(self) -> Vec<NeighborEntry> {
        self.entries
    }
}

/// Merges `candidates` into `list`, keeping the `k` closest distinct ids.
///
/// Equivalent to sorting the concatenation `list ++ candidates` by
/// `(dist, id)` (stable, so the list's copy wins exact ties), dropping
/// repeated ids after their first occurrence and truncating to `k`.
///
/// Internally each side is deduplicated and the merged position of every
/// element is its own index plus its rank in the opposite side, found by
/// binary search. Positions are independent, so the scatter can run in
/// any order.
pub fn merge_into(list: &NeighborList, candidates: &[NeighborEntry], k: usize) -> NeighborList {
    if candidates.is_empty() && list.len() <= k {
        let mut out = list.clone();
        out.capacity = k;
        return out;
    }

    // Candidates: closest copy per id, then sorted by (dist, id).
    let mut cands = candidates.to_vec();
    cands.sort_by(|a, b| a.id.cmp(&b.id).then(a.dist.total_cmp(&b.dist)));
    cands.dedup_by_key(|e| e.id);

    // Resolve id collisions between the two sides.
    let mut keep_list = vec![true; list.len()];
    cands.retain(|c| match list.position(c.id) {
        Some(pos) => {
            if c.dist.total_cmp(&list.entries[pos].dist) == Ordering::Less {
                keep_list[pos] = false;
                true
            } else {
                false
            }
        }
        None => true,
    });
    cands.sort_by(NeighborEntry::order);
    let left: Vec<NeighborEntry> = list
        .entries
        .iter()
        .zip(&keep_list)
        .filter_map(|(e, &keep)| keep.then_some(*e))
        .collect();

    let total = left.len() + cands.len();
    let mut merged: Vec<Option<NeighborEntry>> = vec![None; total];
    for (i, e) in left.iter().enumerate() {
        let rank = cands.partition_point(|c| c.order(e) == Ordering::Less);
        merged[i + rank] = Some(*e);
    }
    for (j, c) in cands.iter().enumerate() {
        let rank = left.partition_point(|e| e.order(c) == Ordering::Less);
        merged[j + rank] = Some(*c);
    }
    let entries: Vec<NeighborEntry> = merged
        .into_iter()
        .take(k)
        .map(|slot| slot.expect("rank merge leaves no holes"))
        .collect();
    NeighborList {
        capacity: k,
        entries,
    }
}

/// One neighbor list per node, all bounded by the same degree `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    k: usize,
    lists: Vec<NeighborList>,
    /// Search entry point (the dataset medoid when known).
    entry: Option<u32>,
}

impl KnnGraph {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            k,
            lists: (0..n).map(|_| NeighborList::new(k)).collect(),
            entry: None,
        }
    }

    /// Builds a graph from existing lists, checking every list invariant.
    pub fn from_lists(k: usize, lists: Vec<NeighborList>) -> Result<Self> {
        let g = Self {
            k,
            lists,
            entry: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub(crate) fn from_lists_unchecked(k: usize, lists: Vec<NeighborList>) -> Self {
        Self {
            k,
            lists,
            entry: None,
        }
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.lists.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn entry(&self) -> Option<u32> {
        self.entry
    }

    pub fn set_entry(&mut self, entry: Option<u32>) {
        self.entry = entry;
    }

    #[inline]
    pub fn list(&self, node: usize) -> &NeighborList {
        &self.lists[node]
    }

    pub fn list_mut(&mut self, node: usize) -> &mut NeighborList {
        &mut self.lists[node]
    }

    pub fn lists(&self) -> &[NeighborList] {
        &self.lists
    }

    pub(crate) fn lists_mut(&mut self) -> &mut [NeighborList] {
        &mut self.lists
    }

    pub fn into_lists(self) -> Vec<NeighborList> {
        self.lists
    }

    /// Merges candidates into `owner`'s list, silently dropping self-loops.
    /// Returns the number of entries that were not present before.
    pub fn merge_candidates(&mut self, owner: u32, candidates: &[NeighborEntry]) -> usize {
        let cands: Vec<NeighborEntry> = candidates
            .iter()
            .copied()
            .filter(|c| c.id != owner)
            .collect();
        let before = &self.lists[owner as usize];
        let after = merge_into(before, &cands, self.k);
        let changed = count_changed(before, &after);
        self.lists[owner as usize] = after;
        changed
    }

    pub fn max_degree(&self) -> usize {
        self.lists.iter().map(NeighborList::len).max().unwrap_or(0)
    }

    /// Checks sortedness, uniqueness, bounds and absence of self-loops.
    pub fn validate(&self) -> Result<()> {
        let n = self.lists.len();
        for (v, list) in self.lists.iter().enumerate() {
            if list.len() > self.k {
                return Err(usage!("node {v}: {} entries exceed degree {}", list.len(), self.k));
            }
            for w in list.entries.windows(2) {
                if w[0].order(&w[1]) != Ordering::Less {
                    return Err(usage!("node {v}: list not strictly sorted by (dist, id)"));
                }
            }
            let mut ids: Vec<u32> = list.ids().collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(usage!("node {v}: duplicate neighbor id"));
            }
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= n || id as usize == v) {
                return Err(usage!("node {v}: invalid neighbor id {bad}"));
            }
        }
        if let Some(e) = self.entry {
            if e as usize >= n {
                return Err(usage!("entry point {e} out of range"));
            }
        }
        Ok(())
    }
}

/// Number of ids in `after` that were absent from `before`.
pub(crate) fn count_changed(before: &NeighborList, after: &NeighborList) -> usize {
    after.ids().filter(|&id| !before.contains(id)).count()
}
