use super::filter::wavefront_rounds;
use super::*;
use crate::dataset::MetricKind;
use crate::search::brute_force_self_knn;
use crate::synth;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn line(xs: &[f32]) -> VectorDataset {
    VectorDataset::new(xs.to_vec(), 1, MetricKind::SquaredL2).unwrap()
}

fn cands_from(ds: &VectorDataset, owner: u32, ids: &[u32]) -> Vec<NeighborEntry> {
    let mut v: Vec<NeighborEntry> = ids
        .iter()
        .map(|&i| NeighborEntry::new(i, ds.dist(owner as usize, i as usize)))
        .collect();
    v.sort_by(NeighborEntry::order);
    v
}

/// Graph whose lists are given by id only; distances are the rank so lists
/// stay sorted in the given order.
fn rank_graph(lists: &[Vec<u32>]) -> KnnGraph {
    let k = lists.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let lists = lists
        .iter()
        .map(|ids| {
            NeighborList::raw(
                k,
                ids.iter()
                    .enumerate()
                    .map(|(r, &id)| NeighborEntry::old(id, r as f32))
                    .collect(),
            )
        })
        .collect();
    KnnGraph::from_lists_unchecked(k, lists)
}

fn exact_graph(ds: &VectorDataset, k: usize) -> KnnGraph {
    let gt = brute_force_self_knn(ds, k).unwrap();
    let lists = (0..ds.len())
        .map(|i| {
            NeighborList::from_entries(
                k,
                gt.ids(i)
                    .iter()
                    .zip(gt.dists(i))
                    .map(|(&id, &d)| NeighborEntry::old(id, d)),
            )
        })
        .collect();
    let mut g = KnnGraph::from_lists(k, lists).unwrap();
    g.set_entry(Some(ds.medoid()));
    g
}

/// Triple-loop detour oracle straight from the definition.
fn brute_detours(graph: &KnnGraph, node: usize) -> Vec<u32> {
    let list: Vec<u32> = graph.list(node).ids().collect();
    let rank_in = |u: u32, v: u32| graph.list(u as usize).position(v).map(|p| p + 1);
    (0..list.len())
        .map(|j| {
            let rj = j + 1;
            list.iter()
                .filter(|&&pk| {
                    let rk = rank_in(node as u32, pk).unwrap();
                    rk < rj && matches!(rank_in(pk, list[j]), Some(r) if r < rj)
                })
                .count() as u32
        })
        .collect()
}

#[test]
fn serial_filter_hand_examples() {
    let ds = line(&[0.0, 1.0, 2.0, 4.0]);
    let cands = cands_from(&ds, 0, &[1, 2, 3]);
    assert_eq!(serial_filter(0, &cands, FilterRule::Dist { alpha: 1.0 }, 3, &ds), vec![1]);
    assert_eq!(
        serial_filter(0, &cands, FilterRule::Dist { alpha: 5.0 }, 3, &ds),
        vec![1, 2, 3]
    );
    assert_eq!(serial_filter(0, &cands[2..], FilterRule::Dist { alpha: 1.0 }, 3, &ds), vec![3]);
    assert_eq!(serial_filter(0, &cands, FilterRule::Dist { alpha: 5.0 }, 2, &ds), vec![1, 2]);
}

#[test]
fn boundary_equality_is_pruned() {
    // dis(0, 2) = 4 and 4 * dis(1, 2) = 4: not strictly smaller.
    let ds = line(&[0.0, 1.0, 2.0]);
    let cands = cands_from(&ds, 0, &[1, 2]);
    assert_eq!(serial_filter(0, &cands, FilterRule::Dist { alpha: 4.0 }, 2, &ds), vec![1]);
    assert_eq!(wavefront_filter(0, &cands, FilterRule::Dist { alpha: 4.0 }, 2, &ds), vec![1]);
}

#[test]
fn angle_rule_on_a_plane() {
    let ds = VectorDataset::from_rows(
        &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.1]],
        MetricKind::SquaredL2,
    )
    .unwrap();
    let cands = cands_from(&ds, 0, &[1, 2, 3]);
    // 3 sits almost behind 1; 2 is at a right angle.
    assert_eq!(serial_filter(0, &cands, FilterRule::Angle { gamma: 60.0 }, 3, &ds), vec![1, 2]);
    assert_eq!(serial_filter(0, &cands, FilterRule::Angle { gamma: 0.0 }, 3, &ds), vec![1, 2, 3]);
    assert_eq!(serial_filter(0, &cands, FilterRule::Angle { gamma: 90.0 }, 3, &ds), vec![1]);
}

#[test]
fn wavefront_front_shrinks_monotonically() {
    let ds = synth::uniform(200, 4, 5);
    let cands = cands_from(&ds, 0, &(1..200).collect::<Vec<_>>());
    let mut sizes = Vec::new();
    let mut removed_ever: std::collections::HashSet<u32> = Default::default();
    let mut prev: Vec<u32> = cands[1..].iter().map(|e| e.id).collect();
    let out = wavefront_rounds(0, &cands, FilterRule::Dist { alpha: 1.2 }, 16, &ds, |_, front| {
        let ids: Vec<u32> = front.iter().map(|e| e.id).collect();
        for id in &ids {
            assert!(!removed_ever.contains(id), "{id} reappeared");
        }
        for id in &prev {
            if !ids.contains(id) {
                removed_ever.insert(*id);
            }
        }
        sizes.push(ids.len());
        prev = ids;
    });
    assert!(sizes.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(out, serial_filter(0, &cands, FilterRule::Dist { alpha: 1.2 }, 16, &ds));
}

#[test]
fn empty_and_single_candidate() {
    let ds = line(&[0.0, 3.0]);
    let rule = FilterRule::Dist { alpha: 1.0 };
    assert!(wavefront_filter(0, &[], rule, 4, &ds).is_empty());
    let c = cands_from(&ds, 0, &[1]);
    assert_eq!(wavefront_filter(0, &c, rule, 4, &ds), vec![1]);
    assert_eq!(serial_filter(0, &c, rule, 4, &ds), vec![1]);
}

fn rules() -> [FilterRule; 4] {
    [
        FilterRule::Dist { alpha: 1.0 },
        FilterRule::Dist { alpha: 1.2 },
        FilterRule::Angle { gamma: 60.0 },
        FilterRule::Angle { gamma: 0.0 },
    ]
}

#[test]
fn wavefront_matches_serial_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let n = rng.random_range(2..=200);
        let dim = rng.random_range(1..=6);
        let ds = synth::uniform(n, dim, trial);
        let owner = rng.random_range(0..n as u32);
        let ids: Vec<u32> = (0..n as u32).filter(|&i| i != owner).collect();
        let cands = cands_from(&ds, owner, &ids);
        let d = rng.random_range(1..=16);
        for rule in rules() {
            assert_eq!(
                wavefront_filter(owner, &cands, rule, d, &ds),
                serial_filter(owner, &cands, rule, d, &ds),
                "trial {trial} {rule:?}"
            );
        }
    }
}

proptest! {
    #[test]
    fn wavefront_matches_serial_on_integer_points(
        pts in proptest::collection::vec((-3i32..=3, -3i32..=3, -3i32..=3), 2..=7),
        d in 1usize..=6,
    ) {
        let rows: Vec<Vec<f32>> = pts.iter().map(|&(x, y, z)| vec![x as f32, y as f32, z as f32]).collect();
        let ds = VectorDataset::from_rows(&rows, MetricKind::SquaredL2).unwrap();
        let ids: Vec<u32> = (1..rows.len() as u32).collect();
        let cands = cands_from(&ds, 0, &ids);
        for rule in rules() {
            prop_assert_eq!(
                wavefront_filter(0, &cands, rule, d, &ds),
                serial_filter(0, &cands, rule, d, &ds)
            );
        }
    }
}

#[test]
fn balanced_pairs_examples() {
    let b = balanced_pairs(5).unwrap();
    assert_eq!(b.singleton, 1);
    assert_eq!(b.pairs, vec![(2, 5), (3, 4)]);
    assert_eq!(balanced_pairs(2).unwrap().pairs, vec![(2, 2)]);
    assert!(balanced_pairs(1).is_err());
    for k in 2..40 {
        let b = balanced_pairs(k).unwrap();
        let mut ranks: Vec<usize> = b.ranks().collect();
        ranks.sort_unstable();
        assert_eq!(ranks, (1..=k).collect::<Vec<_>>(), "k={k}");
        assert!(b.pairs.iter().all(|&p| BalancedPairs::pair_work(p) == k), "k={k}");
    }
}

#[test]
fn detour_counts_on_a_worked_instance() {
    // A=0 with list [B, C, D, E, F]; D's list holds F at rank 4.
    let g = rank_graph(&[
        vec![1, 2, 3, 4, 5],
        vec![0, 2, 3, 4, 6],
        vec![0, 1, 3, 4, 6],
        vec![0, 1, 2, 5, 6],
        vec![0, 1, 2, 3, 6],
        vec![3, 6, 7, 8, 9],
        vec![0, 1, 2, 3, 4],
        vec![0, 1, 2, 3, 4],
        vec![0, 1, 2, 3, 4],
        vec![0, 1, 2, 3, 4],
    ]);
    let counts = count_detours(&g, 0).unwrap();
    assert_eq!(counts, brute_detours(&g, 0));
    // Only the route A -> D -> F reaches F in fewer than 5 rank steps.
    assert_eq!(counts[4], 1);
}

#[test]
fn star_graph_has_no_detours() {
    let g = rank_graph(&[vec![1, 2, 3, 4], vec![0], vec![0], vec![0], vec![0]]);
    assert_eq!(count_detours(&g, 0).unwrap(), vec![0; 4]);
    assert_eq!(filter_rank(&g, 0, 2).unwrap(), vec![1, 2]);
    assert!(count_detours(&g, 9).is_err());
}

#[test]
fn select_by_detours_examples() {
    assert_eq!(select_by_detours(&[0, 3, 1, 2, 0], 3), vec![0, 4, 2]);
    assert_eq!(select_by_detours(&[0; 4], 2), vec![0, 1]);
    assert_eq!(select_by_detours(&[2, 1, 0], 3).len(), 3);
}

#[test]
fn detours_match_brute_force_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let n = rng.random_range(3..=120);
        let k = rng.random_range(1..=16.min(n - 1));
        let lists: Vec<Vec<u32>> = (0..n as u32)
            .map(|u| {
                let mut ids: Vec<u32> = (0..n as u32).filter(|&v| v != u).collect();
                for i in 0..k {
                    let j = rng.random_range(i..ids.len());
                    ids.swap(i, j);
                }
                ids.truncate(k);
                ids
            })
            .collect();
        let g = rank_graph(&lists);
        for node in 0..n {
            assert_eq!(count_detours(&g, node).unwrap(), brute_detours(&g, node));
        }
    }
}

#[test]
fn config_validation_and_parsing() {
    assert!(PruneConfig::nsg(32).validate().is_ok());
    assert!(PruneConfig::cagra(16).validate().is_ok());
    assert!(PruneConfig::dpg(16).validate().is_ok());
    assert!(PruneConfig { thres: 0.9, ..PruneConfig::vamana(8, 1.2) }.validate().is_err());
    assert!(PruneConfig { cand_size: 4, ..PruneConfig::vamana(8, 1.2) }.validate().is_err());
    assert!(PruneConfig { beam: 4, ..PruneConfig::vamana(8, 1.2) }.validate().is_err());
    assert!(PruneConfig { mode: CollectMode::Path, ..PruneConfig::cagra(8) }.validate().is_err());

    let cfg = PruneConfig::parse_kv("mode=2-hop metric=angle\ndegree=16 # trailing\ncand_size=64").unwrap();
    assert_eq!(cfg.mode, CollectMode::TwoHop);
    assert_eq!(cfg.thres, DEFAULT_GAMMA);
    assert_eq!(PruneConfig::parse_kv(&cfg.to_string()).unwrap(), cfg);
    assert!(PruneConfig::parse_kv("bogus=1").is_err());
    assert!(PruneConfig::parse_kv("degree").is_err());
}

#[test]
fn collect_modes() {
    let ds = line(&[0.0, 1.0, 2.0, 3.0]);
    // 4-cycle with k=2.
    let g = rank_graph(&[vec![1, 3], vec![0, 2], vec![1, 3], vec![2, 0]]);
    let one = collect(&g, &ds, 0, &PruneConfig { mode: CollectMode::OneHop, ..PruneConfig::dpg(2) }, 0).unwrap();
    assert_eq!(one.ids(), vec![1, 3]);
    let two = collect(&g, &ds, 0, &PruneConfig::nssg(2, 60.0), 0).unwrap();
    assert_eq!(two.ids(), vec![1, 2, 3]);
    assert!(two.entries.windows(2).all(|w| w[0].order(&w[1]).is_lt()));

    let ds = synth::uniform(100, 4, 9);
    let g = exact_graph(&ds, 10);
    let truth = brute_force_self_knn(&ds, 1).unwrap();
    let cfg = PruneConfig { beam: 32, ..PruneConfig::nsg(10) };
    for node in 0..100 {
        let c = collect(&g, &ds, node, &cfg, g.entry().unwrap()).unwrap();
        assert!(c.entries.len() <= cfg.cand_size);
        assert!(c.ids().iter().all(|&i| i as usize != node));
        assert!(c.ids().contains(&truth.ids(node)[0]), "node {node}");
    }
}

#[test]
fn pruned_lists_satisfy_the_occlusion_rules() {
    let ds = synth::gaussian_mixture(600, 8, 4, 1.0, 1);
    let g = exact_graph(&ds, 24);
    for cfg in [
        PruneConfig::nsg(12),
        PruneConfig::vamana(12, 1.2),
        PruneConfig::nssg(12, 60.0),
    ] {
        let before = g.clone();
        let out = prune_graph(&g, &ds, &cfg).unwrap();
        assert_eq!(g, before);
        out.validate().unwrap();
        assert!(out.max_degree() <= cfg.degree);
        let rule = cfg.rule().unwrap();
        for p in 0..ds.len() {
            let list = out.list(p).entries();
            for (i, a) in list.iter().enumerate() {
                assert_eq!(a.dist, ds.dist(p, a.id as usize));
                for b in &list[i + 1..] {
                    assert!(rule.survives(&ds, p as u32, a, b), "{cfg}: node {p}");
                }
            }
        }
    }
}

#[test]
fn relaxed_filters_only_remove() {
    let ds = synth::uniform(300, 6, 2);
    let g = exact_graph(&ds, 10);
    let cfg = PruneConfig {
        mode: CollectMode::OneHop,
        thres: 1e9,
        cand_size: 10,
        ..PruneConfig::vamana(10, 1.0)
    };
    let out = prune_graph(&g, &ds, &cfg).unwrap();
    for p in 0..ds.len() {
        assert!(out.list(p).ids().all(|id| g.list(p).contains(id)));
    }
}

#[test]
fn rank_prune_is_per_node_filter_rank() {
    let ds = synth::gaussian_mixture(400, 8, 4, 1.0, 4);
    let g = exact_graph(&ds, 16);
    let out = prune_graph(&g, &ds, &PruneConfig::cagra(8)).unwrap();
    for p in 0..ds.len() {
        let mut want = filter_rank(&g, p, 8).unwrap();
        want.sort_by(|&a, &b| {
            NeighborEntry::new(a, ds.dist(p, a as usize)).order(&NeighborEntry::new(b, ds.dist(p, b as usize)))
        });
        assert_eq!(out.list(p).ids().collect::<Vec<_>>(), want);
    }
    let full = prune_graph(&g, &ds, &PruneConfig::cagra(16)).unwrap();
    for p in 0..ds.len() {
        assert_eq!(full.list(p).ids().collect::<Vec<_>>(), g.list(p).ids().collect::<Vec<_>>());
    }
}
