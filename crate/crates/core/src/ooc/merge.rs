//! Merging local indexes into the global one under a bounded cache.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::TempDir;

use crate::error::{usage, Error, Result};
use crate::io::{read_list, write_list};
use crate::neighbor::{merge_into, KnnGraph, NeighborEntry, NeighborList};

/// A cluster's graph with global ids: `lists[i]` belongs to `nodes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalIndex {
    pub cluster: u32,
    pub nodes: Vec<u32>,
    pub lists: Vec<NeighborList>,
}

/// Where a node's current merged list lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeiLoc {
    Unset,
    /// In the resident storage of this cluster.
    Cached(u32),
    OnDisk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MergeStats {
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub disk_reads: u64,
    pub disk_writes: u64,
    pub nodes_merged: u64,
}

impl MergeStats {
    pub fn hit_ratio(&self) -> f64 {
        match self.cache_hits + self.cache_misses {
            0 => 1.0,
            t => self.cache_hits as f64 / t as f64,
        }
    }

    fn add(&mut self, o: &MergeStats) {
        self.cache_hits += o.cache_hits;
        self.cache_misses += o.cache_misses;
        self.disk_reads += o.disk_reads;
        self.disk_writes += o.disk_writes;
        self.nodes_merged += o.nodes_merged;
    }
}

/// Evicted lists, one batch file per eviction with records sorted by node
/// id. Lives in a temporary directory removed on drop.
#[derive(Debug)]
pub struct DiskStore {
    dir: TempDir,
    degree: usize,
    batches: Vec<PathBuf>,
    /// node -> (batch, byte offset) of its latest record.
    index: HashMap<u32, (usize, u64)>,
}

impl DiskStore {
    pub fn new(scratch: Option<&Path>, degree: usize) -> Result<Self> {
        let dir = match scratch {
            Some(p) => {
                std::fs::create_dir_all(p)?;
                tempfile::Builder::new().prefix("graphforge-").tempdir_in(p)?
            }
            None => tempfile::Builder::new().prefix("graphforge-").tempdir()?,
        };
        Ok(Self {
            dir,
            degree,
            batches: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn contains(&self, node: u32) -> bool {
        self.index.contains_key(&node)
    }

    /// Writes one batch; `lists` must be sorted by node id.
    pub fn write_batch(&mut self, lists: &[(u32, NeighborList)]) -> Result<()> {
        let batch = self.batches.len();
        let path = self.dir.path().join(format!("batch-{batch:06}.bin"));
        let mut w = BufWriter::new(File::create(&path)?);
        let mut offset = 0u64;
        let mut placed = Vec::with_capacity(lists.len());
        for (node, list) in lists {
            placed.push((*node, offset));
            write_list(&mut w, list)?;
            offset += 4 + 8 * list.len() as u64;
        }
        w.flush()?;
        self.batches.push(path);
        for (node, off) in placed {
            self.index.insert(node, (batch, off));
        }
        Ok(())
    }

    pub fn read(&self, node: u32) -> Result<NeighborList> {
        let &(batch, off) = self
            .index
            .get(&node)
            .ok_or_else(|| usage!("node {node} was never written to disk"))?;
        let mut r = BufReader::new(File::open(&self.batches[batch])?);
        r.seek(SeekFrom::Start(off))?;
        let raw = read_list(&mut r, self.degree)?;
        Ok(NeighborList::from_entries(self.degree, raw.into_entries()))
    }
}

/// Registry, resident cluster storage, disk store and counters.
#[derive(Debug)]
pub struct MergeState {
    degree: usize,
    registry: Vec<NeiLoc>,
    resident: BTreeMap<u32, HashMap<u32, NeighborList>>,
    disk: DiskStore,
    stats: MergeStats,
}

impl MergeState {
    pub fn new(n: usize, degree: usize, scratch: Option<&Path>) -> Result<Self> {
        if degree == 0 {
            return Err(usage!("merge degree must be at least 1"));
        }
        Ok(Self {
            degree,
            registry: vec![NeiLoc::Unset; n],
            resident: BTreeMap::new(),
            disk: DiskStore::new(scratch, degree)?,
            stats: MergeStats::default(),
        })
    }

    pub fn stats(&self) -> MergeStats {
        self.stats
    }

    pub fn location(&self, node: u32) -> NeiLoc {
        self.registry[node as usize]
    }

    pub fn is_resident(&self, cluster: u32) -> bool {
        self.resident.contains_key(&cluster)
    }

    pub fn resident_clusters(&self) -> impl Iterator<Item = u32> + '_ {
        self.resident.keys().copied()
    }

    pub fn disk(&self) -> &DiskStore {
        &self.disk
    }

    /// Makes `li.cluster` resident and folds each of its lists into the
    /// node's current list, which then moves into this cluster's storage.
    pub fn merge_local_index(&mut self, li: LocalIndex) -> Result<MergeStats> {
        if li.nodes.len() != li.lists.len() {
            return Err(usage!("local index has {} nodes but {} lists", li.nodes.len(), li.lists.len()));
        }
        if self.resident.contains_key(&li.cluster) {
            return Err(usage!("cluster {} is already resident", li.cluster));
        }
        let mut delta = MergeStats::default();
        // Stage all reads and merges first so a failed read leaves the
        // state untouched.
        let mut staged = Vec::with_capacity(li.nodes.len());
        for (&node, list) in li.nodes.iter().zip(&li.lists) {
            let loc = *self
                .registry
                .get(node as usize)
                .ok_or_else(|| usage!("node {node} out of range"))?;
            let prior = match loc {
                NeiLoc::Unset => None,
                NeiLoc::Cached(c) => {
                    delta.cache_hits += 1;
                    Some(self.resident[&c][&node].clone())
                }
                NeiLoc::OnDisk => {
                    delta.cache_misses += 1;
                    delta.disk_reads += 1;
                    Some(self.disk.read(node)?)
                }
            };
            let merged = match prior {
                None => NeighborList::from_entries(self.degree, list.entries().iter().map(as_old)),
                Some(p) => merge_into(&p, list.entries(), self.degree),
            };
            staged.push((node, loc, merged));
            delta.nodes_merged += 1;
        }
        let mut storage = HashMap::with_capacity(staged.len());
        for (node, loc, mut merged) in staged {
            if let NeiLoc::Cached(c) = loc {
                self.resident.get_mut(&c).expect("cached cluster is resident").remove(&node);
            }
            merged.entries_mut().iter_mut().for_each(|e| *e = as_old(e));
            storage.insert(node, merged);
            self.registry[node as usize] = NeiLoc::Cached(li.cluster);
        }
        self.resident.insert(li.cluster, storage);
        self.stats.add(&delta);
        Ok(delta)
    }

    /// Persists every list held in `cluster`'s storage and releases it.
    /// Returns the number of lists written.
    pub fn evict_cluster(&mut self, cluster: u32) -> Result<u64> {
        let storage = self
            .resident
            .get(&cluster)
            .ok_or_else(|| usage!("cluster {cluster} is not resident"))?;
        let mut lists: Vec<(u32, NeighborList)> = storage.iter().map(|(&n, l)| (n, l.clone())).collect();
        lists.sort_unstable_by_key(|(n, _)| *n);
        self.disk.write_batch(&lists)?;
        self.resident.remove(&cluster);
        for (node, _) in &lists {
            self.registry[*node as usize] = NeiLoc::OnDisk;
        }
        let written = lists.len() as u64;
        self.stats.disk_writes += written;
        Ok(written)
    }

    /// Walks the registry: cached entries must resolve to resident lists,
    /// on-disk entries must have a persisted record, and unset nodes must
    /// not be stored anywhere.
    pub fn check_registry(&self) -> Result<()> {
        let mut owners: HashMap<u32, u32> = HashMap::new();
        for (&c, storage) in &self.resident {
            for &node in storage.keys() {
                if let Some(other) = owners.insert(node, c) {
                    return Err(usage!("node {node} stored by clusters {other} and {c}"));
                }
            }
        }
        for (node, loc) in self.registry.iter().enumerate() {
            let node = node as u32;
            let ok = match loc {
                NeiLoc::Unset => !owners.contains_key(&node),
                NeiLoc::Cached(c) => owners.get(&node) == Some(c),
                NeiLoc::OnDisk => !owners.contains_key(&node) && self.disk.contains(node),
            };
            if !ok {
                return Err(usage!("registry entry {loc:?} for node {node} does not resolve"));
            }
        }
        Ok(())
    }

    /// Assembles the global graph from resident storage and disk. Nodes
    /// never merged get empty lists. These final reads are not counted.
    pub fn into_graph(self) -> Result<KnnGraph> {
        let mut lists = Vec::with_capacity(self.registry.len());
        for (node, loc) in self.registry.iter().enumerate() {
            let node = node as u32;
            lists.push(match *loc {
                NeiLoc::Unset => NeighborList::new(self.degree),
                NeiLoc::Cached(c) => self.resident[&c][&node].clone(),
                NeiLoc::OnDisk => self.disk.read(node)?,
            });
        }
        KnnGraph::from_lists(self.degree, lists).map_err(|e| match e {
            Error::Usage(m) => Error::Format(m),
            e => e,
        })
    }
}

fn as_old(e: &NeighborEntry) -> NeighborEntry {
    NeighborEntry::old(e.id, e.dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn li(cluster: u32, nodes: &[u32], lists: &[&[(u32, f32)]]) -> LocalIndex {
        LocalIndex {
            cluster,
            nodes: nodes.to_vec(),
            lists: lists
                .iter()
                .map(|l| NeighborList::from_entries(4, l.iter().map(|&(id, d)| NeighborEntry::new(id, d))))
                .collect(),
        }
    }

    #[test]
    fn first_occurrence_counts_nothing_but_the_merge() {
        let mut st = MergeState::new(3, 2, None).unwrap();
        let d = st.merge_local_index(li(0, &[0, 1], &[&[(1, 1.0)], &[(0, 1.0)]])).unwrap();
        assert_eq!(d, MergeStats { nodes_merged: 2, ..Default::default() });
        assert_eq!(st.location(0), NeiLoc::Cached(0));
        assert_eq!(st.location(2), NeiLoc::Unset);
        st.check_registry().unwrap();
    }

    #[test]
    fn resident_repeat_is_a_hit() {
        let mut st = MergeState::new(3, 2, None).unwrap();
        st.merge_local_index(li(0, &[0, 1], &[&[(1, 1.0)], &[(0, 1.0)]])).unwrap();
        let d = st.merge_local_index(li(1, &[0, 2], &[&[(2, 0.5), (1, 3.0)], &[(0, 0.5)]])).unwrap();
        assert_eq!((d.cache_hits, d.cache_misses, d.disk_reads), (1, 0, 0));
        // Node 0 moved into cluster 1's storage: evicting 0 does not write it.
        assert_eq!(st.location(0), NeiLoc::Cached(1));
        assert_eq!(st.evict_cluster(0).unwrap(), 1);
        assert_eq!(st.location(1), NeiLoc::OnDisk);
        assert_eq!(st.location(0), NeiLoc::Cached(1));
        st.check_registry().unwrap();
        let g = st.into_graph().unwrap();
        assert_eq!(g.list(0).ids().collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn evicted_repeat_is_a_miss_with_two_io() {
        let mut st = MergeState::new(3, 2, None).unwrap();
        st.merge_local_index(li(0, &[0, 1], &[&[(1, 1.0)], &[(0, 1.0)]])).unwrap();
        assert_eq!(st.evict_cluster(0).unwrap(), 2);
        assert!(st.evict_cluster(0).is_err());
        let d = st.merge_local_index(li(1, &[0, 2], &[&[(2, 0.5)], &[(0, 0.5)]])).unwrap();
        assert_eq!((d.cache_hits, d.cache_misses, d.disk_reads), (0, 1, 1));
        let s = st.stats();
        assert!(s.disk_reads + s.disk_writes >= 2 * s.cache_misses);
        st.check_registry().unwrap();
        let g = st.into_graph().unwrap();
        assert_eq!(g.list(0).ids().collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(g.list(1).ids().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn untouched_cluster_eviction_writes_every_member() {
        let mut st = MergeState::new(10, 2, None).unwrap();
        let nodes: Vec<u32> = (0..10).collect();
        let lists: Vec<&[(u32, f32)]> = vec![&[]; 10];
        st.merge_local_index(li(3, &nodes, &lists)).unwrap();
        assert_eq!(st.evict_cluster(3).unwrap(), 10);
        assert_eq!(std::fs::read_dir(st.disk().path()).unwrap().count(), 1);
    }

    #[test]
    fn scratch_is_removed_on_drop() {
        let root = tempfile::tempdir().unwrap();
        let path = {
            let mut st = MergeState::new(2, 2, Some(root.path())).unwrap();
            st.merge_local_index(li(0, &[0], &[&[(1, 1.0)]])).unwrap();
            st.evict_cluster(0).unwrap();
            st.disk().path().to_path_buf()
        };
        assert!(!path.exists());
    }

    #[test]
    fn rejects_double_residency_and_bad_nodes() {
        let mut st = MergeState::new(2, 2, None).unwrap();
        st.merge_local_index(li(0, &[0], &[&[]])).unwrap();
        assert!(st.merge_local_index(li(0, &[1], &[&[]])).is_err());
        assert!(st.merge_local_index(li(1, &[5], &[&[]])).is_err());
        assert_eq!(st.location(1), NeiLoc::Unset);
    }
}
