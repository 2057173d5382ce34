//! Overlapping k-means partitioning and the cluster-sharing graph.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{dist_unchecked, MetricKind, VectorDataset};
use crate::error::{usage, Error, Result};

/// Points beyond this count are subsampled before running Lloyd rounds.
pub const KMEANS_SAMPLE_LIMIT: usize = 256_000;
pub const DEFAULT_KMEANS_ITERS: usize = 20;
pub const DEFAULT_OVERLAP: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    dim: usize,
    values: Vec<f32>,
}

impl Centroids {
    pub fn new(values: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(usage!("{} values do not form centroids of dimension {dim}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(usage!("centroids must be finite"));
        }
        Ok(Self { dim, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.values[c * self.dim..(c + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    /// Closest centroid to `v`, ties to the smaller id.
    pub fn nearest(&self, v: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for c in 0..self.len() {
            let d = dist_unchecked(v, self.centroid(c), MetricKind::SquaredL2);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    /// Sum of squared distances from every point to its nearest centroid.
    pub fn cost(&self, dataset: &VectorDataset) -> f64 {
        let per: Vec<f64> = (0..dataset.len())
            .into_par_iter()
            .map(|i| self.nearest(dataset.vector(i)).1 as f64)
            .collect();
        per.iter().sum()
    }
}

/// Centroids plus the cost after each assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Centroids,
    pub costs: Vec<f64>,
}

pub fn kmeans(dataset: &VectorDataset, c: usize, iters: usize, seed: u64) -> Result<Centroids> {
    kmeans_traced(dataset, c, iters, seed).map(|r| r.centroids)
}

/// k-means++ seeding followed by up to `iters` Lloyd rounds, stopping early
/// once assignments no longer change. Always uses squared L2.
pub fn kmeans_traced(dataset: &VectorDataset, c: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    let n = dataset.len();
    if c == 0 || c > n {
        return Err(usage!("cannot form {c} clusters from {n} points"));
    }
    if iters == 0 {
        return Err(usage!("k-means needs at least one iteration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample;
    let ds = if n > KMEANS_SAMPLE_LIMIT {
        let mut ids: Vec<u32> = index::sample(&mut rng, n, KMEANS_SAMPLE_LIMIT)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        ids.sort_unstable();
        sample = dataset.subset(&ids)?;
        &sample
    } else {
        dataset
    };
    let (n, dim) = (ds.len(), ds.dim());

    let mut centroids = plus_plus_init(ds, c, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut costs = Vec::with_capacity(iters);
    for _ in 0..iters {
        let nearest: Vec<(usize, f32)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_in(&centroids, dim, ds.vector(i)))
            .collect();
        costs.push(nearest.iter().map(|&(_, d)| d as f64).sum());
        let changed = nearest.iter().zip(&assign).any(|(&(a, _), &b)| a != b);
        if !changed {
            break;
        }
        for (slot, &(a, _)) in assign.iter_mut().zip(&nearest) {
            *slot = a;
        }

        let mut sums = vec![0f64; c * dim];
        let mut counts = vec![0usize; c];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(ds.vector(i)) {
                *s += x as f64;
            }
        }
        for a in 0..c {
            if counts[a] > 0 {
                for (dst, &s) in centroids[a * dim..(a + 1) * dim]
                    .iter_mut()
                    .zip(&sums[a * dim..(a + 1) * dim])
                {
                    *dst = (s / counts[a] as f64) as f32;
                }
            }
        }
        // Re-seed empty clusters at the point farthest from its centroid.
        let mut far: Vec<f32> = (0..n)
            .map(|i| {
                let a = assign[i];
                dist_unchecked(ds.vector(i), &centroids[a * dim..(a + 1) * dim], MetricKind::SquaredL2)
            })
            .collect();
        for a in (0..c).filter(|&a| counts[a] == 0) {
            let (i, _) = far
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            centroids[a * dim..(a + 1) * dim].copy_from_slice(ds.vector(i));
            far[i] = 0.0;
        }
    }
    Ok(KMeansResult {
        centroids: Centroids::new(centroids, dim)?,
        costs,
    })
}

fn nearest_in(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (c, cv) in centroids.chunks_exact(dim).enumerate() {
        let d = dist_unchecked(v, cv, MetricKind::SquaredL2);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(ds: &VectorDataset, c: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = ds.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = ds.vector(first).to_vec();
    let mut d2: Vec<f32> = (0..n)
        .map(|i| dist_unchecked(ds.vector(i), ds.vector(first), MetricKind::SquaredL2))
        .collect();
    while centroids.len() < c * ds.dim() {
        let next = match WeightedIndex::new(d2.iter().map(|&d| d as f64)) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a centroid.
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen[next] = true;
        let v = ds.vector(next);
        centroids.extend_from_slice(v);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist_unchecked(ds.vector(i), v, MetricKind::SquaredL2));
        }
    }
    centroids
}

/// Each node's `m` clusters (ascending centroid distance) and each
/// cluster's members (ascending node id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    m: usize,
    node_clusters: Vec<u32>,
    members: Vec<Vec<u32>>,
}

impl ClusterAssignment {
    /// Builds from a flat `n × m` array of cluster ids.
    pub fn from_node_clusters(clusters: usize, m: usize, node_clusters: Vec<u32>) -> Result<Self> {
        if m == 0 || !node_clusters.len().is_multiple_of(m) {
            return Err(usage!("{} cluster ids do not split into groups of {m}", node_clusters.len()));
        }
        let mut members = vec![Vec::new(); clusters];
        for (node, group) in node_clusters.chunks_exact(m).enumerate() {
            for (i, &c) in group.iter().enumerate() {
                if c as usize >= clusters {
                    return Err(usage!("node {node}: cluster {c} out of range for {clusters}"));
                }
                if group[..i].contains(&c) {
                    return Err(usage!("node {node}: cluster {c} listed twice"));
                }
                members[c as usize].push(node as u32);
            }
        }
        Ok(Self {
            m,
            node_clusters,
            members,
        })
    }

    pub fn overlap(&self) -> usize {
        self.m
    }

    pub fn num_nodes(&self) -> usize {
        self.node_clusters.len() / self.m
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn clusters_of(&self, node: usize) -> &[u32] {
        &self.node_clusters[node * self.m..(node + 1) * self.m]
    }

    pub fn members(&self, cluster: usize) -> &[u32] {
        &self.members[cluster]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for &c in &self.node_clusters {
            w.write_u32::<LittleEndian>(c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, clusters: usize, m: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % (4 * m.max(1)) != 0 {
            return Err(Error::Format(format!(
                "assignment of {} bytes is not a whole number of {m}-cluster records",
                bytes.len()
            )));
        }
        let mut ids = vec![0u32; bytes.len() / 4];
        (&bytes[..]).read_u32_into::<LittleEndian>(&mut ids)?;
        Self::from_node_clusters(clusters, m, ids).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read(path: impl AsRef<Path>, clusters: usize, m: usize) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?), clusters, m)
    }
}

/// Assigns every node to its `m` nearest centroids, ties by cluster id.
pub fn assign_overlap(dataset: &VectorDataset, centroids: &Centroids, m: usize) -> Result<ClusterAssignment> {
    let c = centroids.len();
    if m == 0 || m > c {
        return Err(usage!("overlap {m} must be within 1..={c}"));
    }
    if centroids.dim() != dataset.dim() {
        return Err(usage!(
            "centroid dimension {} does not match dataset dimension {}",
            centroids.dim(),
            dataset.dim()
        ));
    }
    let flat: Vec<u32> = (0..dataset.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let v = dataset.vector(i);
            let mut ds: Vec<(f32, u32)> = (0..c)
                .map(|k| (dist_unchecked(v, centroids.centroid(k), MetricKind::SquaredL2), k as u32))
                .collect();
            ds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ds.truncate(m);
            ds.into_iter().map(|(_, k)| k)
        })
        .collect();
    ClusterAssignment::from_node_clusters(c, m, flat)
}

/// Undirected cluster graph with `W(i, j)` = number of shared nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterGraph {
    c: usize,
    weights: Vec<u64>,
}

impl ClusterGraph {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            weights: vec![0; c * c],
        }
    }

    /// Builds from `(i, j, w)` edges; repeated edges accumulate.
    pub fn from_edges(c: usize, edges: &[(usize, usize, u64)]) -> Result<Self> {
        let mut g = Self::new(c);
        for &(i, j, w) in edges {
            if i >= c || j >= c || i == j {
                return Err(usage!("invalid cluster edge ({i}, {j}) for {c} clusters"));
            }
            g.weights[i * c + j] += w;
            g.weights[j * c + i] += w;
        }
        Ok(g)
    }

    pub fn num_clusters(&self) -> usize {
        self.c
    }

    pub fn weight(&self, i: usize, j: usize) -> u64 {
        self.weights[i * self.c + j]
    }

    /// Row `i` of the dense weight matrix.
    pub fn row(&self, i: usize) -> &[u64] {
        &self.weights[i * self.c..(i + 1) * self.c]
    }

    /// Nonzero edges with `i < j`, row-major.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        (0..self.c).flat_map(move |i| {
            (i + 1..self.c).filter_map(move |j| {
                let w = self.weight(i, j);
                (w > 0).then_some((i, j, w))
            })
        })
    }

    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, j, wt) in self.edges() {
            writeln!(w, "{i} {j} {wt}")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_cluster_graph(assignment: &ClusterAssignment) -> ClusterGraph {
    let c = assignment.num_clusters();
    let weights = (0..assignment.num_nodes())
        .into_par_iter()
        .fold(
            || vec![0u64; c * c],
            |mut acc, node| {
                let cs = assignment.clusters_of(node);
                for (x, &a) in cs.iter().enumerate() {
                    for &b in &cs[x + 1..] {
                        acc[a as usize * c + b as usize] += 1;
                        acc[b as usize * c + a as usize] += 1;
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; c * c],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    ClusterGraph { c, weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    fn line(xs: &[f32]) -> VectorDataset {
        VectorDataset::new(xs.to_vec(), 1, MetricKind::SquaredL2).unwrap()
    }

    #[test]
    fn two_blobs() {
        let ds = line(&[0.0, 1.0, 2.0, 100.0, 101.0, 102.0]);
        for seed in 0..20 {
            let c = kmeans(&ds, 2, 20, seed).unwrap();
            let mut vals = c.as_slice().to_vec();
            vals.sort_by(f32::total_cmp);
            assert_eq!(vals, vec![1.0, 101.0], "seed {seed}");
            let a = assign_overlap(&ds, &c, 1).unwrap();
            let lo = a.clusters_of(0)[0] as usize;
            assert_eq!(a.members(lo), &[0, 1, 2]);
            assert_eq!(a.members(1 - lo), &[3, 4, 5]);
        }
    }

    #[test]
    fn c_equals_n_is_a_zero_cost_fixed_point() {
        let ds = synth::uniform(30, 3, 1);
        let r = kmeans_traced(&ds, 30, 5, 2).unwrap();
        assert_eq!(r.centroids.cost(&ds), 0.0);
        assert_eq!(r.costs[0], 0.0);
        assert!(kmeans(&ds, 31, 5, 0).is_err());
        assert!(kmeans(&ds, 3, 0, 0).is_err());
    }

    #[test]
    fn cost_never_increases_and_is_seeded() {
        let ds = synth::gaussian_mixture(2000, 8, 10, 1.5, 3);
        let r = kmeans_traced(&ds, 16, 20, 7).unwrap();
        for w in r.costs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", r.costs);
        }
        assert_eq!(r, kmeans_traced(&ds, 16, 20, 7).unwrap());
    }

    #[test]
    fn duplicate_points_still_yield_c_centroids() {
        let ds = line(&[1.0, 1.0, 1.0, 1.0, 5.0]);
        let c = kmeans(&ds, 3, 10, 0).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn overlap_examples() {
        let cents = Centroids::new(vec![0.0, 10.0, 20.0], 1).unwrap();
        let a = assign_overlap(&line(&[4.0]), &cents, 2).unwrap();
        assert_eq!(a.clusters_of(0), &[0, 1]);
        let ds = synth::uniform(50, 1, 0);
        let all = assign_overlap(&ds, &cents, 3).unwrap();
        for c in 0..3 {
            assert_eq!(all.members(c).len(), 50);
        }
        assert!(assign_overlap(&ds, &cents, 4).is_err());
        // Equidistant: ties go to the smaller cluster id.
        let a = assign_overlap(&line(&[5.0]), &cents, 1).unwrap();
        assert_eq!(a.clusters_of(0), &[0]);
    }

    #[test]
    fn cluster_graph_examples() {
        let ds = synth::uniform(40, 2, 4);
        let cents = kmeans(&ds, 4, 10, 1).unwrap();
        let one = build_cluster_graph(&assign_overlap(&ds, &cents, 1).unwrap());
        assert_eq!(one.edges().count(), 0);

        let both = ClusterAssignment::from_node_clusters(2, 2, [0, 1].repeat(40)).unwrap();
        let g = build_cluster_graph(&both);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1, 40)]);
        let mut text = Vec::new();
        g.write_edge_list(&mut text).unwrap();
        assert_eq!(String::from_utf8(text).unwrap(), "0 1 40\n");
    }

    #[test]
    fn assignment_validation() {
        assert!(ClusterAssignment::from_node_clusters(2, 2, vec![0, 0]).is_err());
        assert!(ClusterAssignment::from_node_clusters(2, 2, vec![0, 2]).is_err());
        assert!(ClusterAssignment::from_node_clusters(2, 2, vec![0, 1, 1]).is_err());
        assert!(ClusterAssignment::read_from(&[1u8, 0, 0][..], 2, 1).is_err());
    }

    proptest! {
        #[test]
        fn cluster_graph_matches_intersections(
            n in 1usize..200,
            m in 1usize..4,
            seed in any::<u64>(),
        ) {
            let c = 8;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flat: Vec<u32> = (0..n)
                .flat_map(|_| index::sample(&mut rng, c, m).into_iter().map(|x| x as u32).collect::<Vec<_>>())
                .collect();
            let a = ClusterAssignment::from_node_clusters(c, m, flat).unwrap();
            prop_assert_eq!((0..c).map(|k| a.members(k).len()).sum::<usize>(), n * m);
            let g = build_cluster_graph(&a);
            for i in 0..c {
                prop_assert_eq!(g.weight(i, i), 0);
                for j in 0..c {
                    let shared = a.members(i).iter().filter(|x| a.members(j).contains(x)).count() as u64;
                    if i != j {
                        prop_assert_eq!(g.weight(i, j), shared);
                        prop_assert_eq!(g.weight(i, j), g.weight(j, i));
                    }
                }
            }
            let mut bytes = Vec::new();
            a.write_to(&mut bytes).unwrap();
            prop_assert_eq!(bytes.len(), 4 * n * m);
            prop_assert_eq!(ClusterAssignment::read_from(&bytes[..], c, m).unwrap(), a);
        }
    }
}
