//! Cluster load/evict scheduling and the counting cache simulator.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{usage, Error, Result};
use crate::partition::{ClusterAssignment, ClusterGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchStep {
    pub load: u32,
    pub evict: Option<u32>,
}

impl fmt::Display for DispatchStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.evict {
            Some(e) => write!(f, "{} {}", self.load, e),
            None => write!(f, "{} -", self.load),
        }
    }
}

/// Cluster load sequence; a step's eviction happens before its load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchOrder {
    steps: Vec<DispatchStep>,
}

impl DispatchOrder {
    pub fn new(steps: Vec<DispatchStep>) -> Self {
        Self { steps }
    }

    /// Loads in the given sequence, evicting the least recently loaded
    /// cluster whenever the cache is full.
    pub fn fifo(loads: impl IntoIterator<Item = u32>, n_cache: usize) -> Self {
        let mut resident = VecDeque::new();
        let steps = loads
            .into_iter()
            .map(|load| {
                let evict = if resident.len() >= n_cache.max(1) {
                    resident.pop_front()
                } else {
                    None
                };
                resident.push_back(load);
                DispatchStep { load, evict }
            })
            .collect();
        Self { steps }
    }

    /// Id-ascending loads, FIFO evictions.
    pub fn sequential(clusters: usize, n_cache: usize) -> Self {
        Self::fifo(0..clusters as u32, n_cache)
    }

    /// Seeded random permutation of loads, FIFO evictions.
    pub fn random(clusters: usize, n_cache: usize, seed: u64) -> Self {
        let mut ids: Vec<u32> = (0..clusters as u32).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::fifo(ids, n_cache)
    }

    pub fn steps(&self) -> &[DispatchStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn loads(&self) -> impl Iterator<Item = u32> + '_ {
        self.steps.iter().map(|s| s.load)
    }

    /// Checks that every cluster is loaded once, the first
    /// `min(n_cache, clusters)` steps evict nothing, later steps evict a
    /// resident cluster, and residency never exceeds `n_cache`.
    pub fn validate(&self, clusters: usize, n_cache: usize) -> Result<()> {
        if n_cache == 0 {
            return Err(usage!("cache capacity must be at least 1"));
        }
        if self.steps.len() != clusters {
            return Err(usage!("order has {} steps for {clusters} clusters", self.steps.len()));
        }
        let mut loaded = vec![false; clusters];
        let mut resident = vec![false; clusters];
        let fill = n_cache.min(clusters);
        for (i, s) in self.steps.iter().enumerate() {
            let l = s.load as usize;
            if l >= clusters || loaded[l] {
                return Err(usage!("step {i}: cluster {l} is out of range or loaded twice"));
            }
            match (i < fill, s.evict) {
                (true, None) => {}
                (false, Some(e)) if (e as usize) < clusters && resident[e as usize] => {
                    resident[e as usize] = false;
                }
                (true, Some(_)) => return Err(usage!("step {i}: evicts before the cache is full")),
                (false, _) => return Err(usage!("step {i}: must evict a resident cluster")),
            }
            loaded[l] = true;
            resident[l] = true;
        }
        Ok(())
    }

    /// One `load evict` line per step, `-` for no eviction.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            writeln!(w, "{s}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut steps = Vec::new();
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("line {}: expected `load evict`, found {line:?}", no + 1));
            let mut it = line.split_whitespace();
            let (Some(load), Some(evict), None) = (it.next(), it.next(), it.next()) else {
                return Err(bad());
            };
            let load = load.parse().map_err(|_| bad())?;
            let evict = match evict {
                "-" => None,
                e => Some(e.parse().map_err(|_| bad())?),
            };
            steps.push(DispatchStep { load, evict });
        }
        Ok(Self { steps })
    }
}

/// Greedy cluster-aware schedule.
///
/// Starting from cluster 0, the cache is filled by repeatedly loading the
/// cluster sharing the most nodes with those already cached. Afterwards
/// each step picks the `(load, evict)` pair maximizing the nodes the new
/// cluster shares with the clusters that stay. Ties go to the smallest
/// load id, then the smallest evict id.
pub fn plan_dispatch(cg: &ClusterGraph, n_cache: usize) -> Result<DispatchOrder> {
    let c = cg.num_clusters();
    if c == 0 {
        return Err(usage!("cannot plan an empty cluster graph"));
    }
    if n_cache == 0 {
        return Err(usage!("cache capacity must be at least 1"));
    }
    let mut loaded = vec![false; c];
    // Kept sorted by id so the eviction tie-break is a first-minimum scan.
    let mut buf: Vec<usize> = Vec::with_capacity(n_cache);
    // gain[x] = sum of W(x, b) over b in buf.
    let mut gain = vec![0u64; c];
    let mut steps = Vec::with_capacity(c);

    let load = |x: usize, buf: &mut Vec<usize>, gain: &mut [u64], loaded: &mut [bool]| {
        loaded[x] = true;
        let pos = buf.partition_point(|&b| b < x);
        buf.insert(pos, x);
        for (g, &w) in gain.iter_mut().zip(cg.row(x)) {
            *g += w;
        }
    };

    load(0, &mut buf, &mut gain, &mut loaded);
    steps.push(DispatchStep { load: 0, evict: None });

    while buf.len() < n_cache && steps.len() < c {
        // First maximum wins, so ties resolve to the smaller id.
        let best = (0..c)
            .filter(|&x| !loaded[x])
            .fold(None, |best: Option<(usize, u64)>, x| match best {
                Some((_, g)) if g >= gain[x] => best,
                _ => Some((x, gain[x])),
            })
            .expect("an unloaded cluster remains")
            .0;
        load(best, &mut buf, &mut gain, &mut loaded);
        steps.push(DispatchStep {
            load: best as u32,
            evict: None,
        });
    }

    while steps.len() < c {
        let mut best: Option<(u64, usize, usize)> = None;
        for x in (0..c).filter(|&x| !loaded[x]) {
            let row = cg.row(x);
            let victim = *buf
                .iter()
                .min_by_key(|&&b| row[b])
                .expect("cache is non-empty");
            let score = gain[x] - row[victim];
            if best.is_none_or(|(s, _, _)| score > s) {
                best = Some((score, x, victim));
            }
        }
        let (_, x, victim) = best.expect("an unloaded cluster remains");
        buf.retain(|&b| b != victim);
        for (g, &w) in gain.iter_mut().zip(cg.row(victim)) {
            *g -= w;
        }
        load(x, &mut buf, &mut gain, &mut loaded);
        steps.push(DispatchStep {
            load: x as u32,
            evict: Some(victim as u32),
        });
    }
    Ok(DispatchOrder { steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheCounts {
    pub hits: u64,
    pub misses: u64,
}

impl CacheCounts {
    /// `hits / (hits + misses)`; 1.0 when no node repeats.
    pub fn ratio(&self) -> f64 {
        match self.hits + self.misses {
            0 => 1.0,
            total => self.hits as f64 / total as f64,
        }
    }

    /// Whether [`ratio`](Self::ratio) had a zero denominator.
    pub fn is_vacuous(&self) -> bool {
        self.hits + self.misses == 0
    }
}

/// Counts cache hits and misses of a merge run without touching vectors or
/// disk. A node's list lives in the storage of the last cluster that
/// merged it; a repeat occurrence hits iff that cluster is still resident.
pub fn simulate_cache(
    assignment: &ClusterAssignment,
    order: &DispatchOrder,
    n_cache: usize,
) -> Result<CacheCounts> {
    let c = assignment.num_clusters();
    order.validate(c, n_cache)?;
    let mut home: Vec<Option<u32>> = vec![None; assignment.num_nodes()];
    let mut resident = vec![false; c];
    let mut counts = CacheCounts::default();
    for step in order.steps() {
        if let Some(e) = step.evict {
            resident[e as usize] = false;
        }
        resident[step.load as usize] = true;
        for &node in assignment.members(step.load as usize) {
            let slot = &mut home[node as usize];
            match *slot {
                None => {}
                Some(h) if resident[h as usize] => counts.hits += 1,
                Some(_) => counts.misses += 1,
            }
            *slot = Some(step.load);
        }
    }
    Ok(counts)
}
