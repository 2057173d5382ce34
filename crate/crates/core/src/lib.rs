//! Refinement-based graph index construction for approximate nearest
//! neighbor search.
//!
//! The pipeline has three stages, each usable on its own:
//!
//! - [`descent`]: two-phase NN-Descent building an approximate k-NN graph
//!   (shared sampling first, then per-node sampling of the closest
//!   unvisited neighbors' lists).
//! - [`prune`]: the Collect / Filter / Store pruning pipeline covering
//!   distance (NSG, Vamana), angle (NSSG, DPG) and rank (CAGRA) rules.
//! - [`ooc`]: out-of-core construction over overlapping k-means clusters
//!   ([`partition`]) with a cluster-aware cache schedule for merging.
//!
//! [`search`] provides greedy beam search, brute-force ground truth and
//! recall/QPS evaluation. [`io`] reads and writes the `fvecs` family and
//! the binary graph format.

pub mod dataset;
pub mod descent;
pub mod error;
pub mod io;
pub mod neighbor;
pub mod ooc;
pub mod partition;
pub mod prune;
pub mod search;
pub mod synth;

pub use dataset::{angle_between, distance, MetricKind, VectorDataset};
pub use error::{Error, Result};
pub use neighbor::{merge_into, Flag, KnnGraph, NeighborEntry, NeighborList};
