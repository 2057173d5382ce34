use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};

/// Distance function over the dataset. Smaller is always closer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum MetricKind {
    #[default]
    SquaredL2,
    /// Negated inner product, so that larger similarity sorts first.
    NegInnerProduct,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" | "squared_l2" | "sql2" => Ok(MetricKind::SquaredL2),
            "ip" | "inner_product" | "neg_inner_product" => Ok(MetricKind::NegInnerProduct),
            other => Err(usage!("unknown metric kind {other:?}")),
        }
    }
}

/// `n` row-major `dim`-dimensional float vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    n: usize,
    dim: usize,
    data: Vec<f32>,
    metric: MetricKind,
}

impl VectorDataset {
    pub fn new(data: Vec<f32>, dim: usize, metric: MetricKind) -> Result<Self> {
        if dim == 0 {
            return Err(usage!("dataset dimensionality must be at least 1"));
        }
        if data.is_empty() {
            return Err(usage!("dataset must contain at least one vector"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(usage!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            ));
        }
        Ok(Self {
            n: data.len() / dim,
            dim,
            data,
            metric,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], metric: MetricKind) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(usage!("ragged rows: expected dim {dim}, found {}", bad.len()));
        }
        Self::new(rows.concat(), dim, metric)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Distance between two stored vectors.
    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f32 {
        dist_unchecked(self.vector(a), self.vector(b), self.metric)
    }

    /// Distance between a stored vector and an external query.
    #[inline]
    pub fn dist_to(&self, a: usize, query: &[f32]) -> f32 {
        debug_assert_eq!(query.len(), self.dim);
        dist_unchecked(self.vector(a), query, self.metric)
    }

    /// Copies the given rows into a new dataset, in the given order.
    pub fn subset(&self, ids: &[u32]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.vector(id as usize));
        }
        Self::new(data, self.dim, self.metric)
    }

    pub fn centroid(&self) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        for row in self.rows() {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x as f64;
            }
        }
        acc.into_iter().map(|a| (a / self.n as f64) as f32).collect()
    }

    /// The stored point closest to the centroid (ties by smaller id).
    pub fn medoid(&self) -> u32 {
        let c = self.centroid();
        let mut best = (f32::INFINITY, 0u32);
        for i in 0..self.n {
            let d = dist_unchecked(self.vector(i), &c, MetricKind::SquaredL2);
            if d < best.0 {
                best = (d, i as u32);
            }
        }
        best.1
    }
}

/// Distance between two vectors of equal length.
pub fn distance(a: &[f32], b: &[f32], metric: MetricKind) -> Result<f32> {
    if a.len() != b.len() {
        return Err(usage!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        ));
    }
    Ok(dist_unchecked(a, b, metric))
}

#[inline]
pub(crate) fn dist_unchecked(a: &[f32], b: &[f32], metric: MetricKind) -> f32 {
    match metric {
        MetricKind::SquaredL2 => squared_l2(a, b),
        MetricKind::NegInnerProduct => -dot(a, b),
    }
}

const LANES: usize = 8;

#[inline]
fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; LANES];
    let (ca, ra) = a.split_at(a.len() - a.len() % LANES);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(LANES).zip(cb.chunks_exact(LANES)) {
        for l in 0..LANES {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; LANES];
    let (ca, ra) = a.split_at(a.len() - a.len() % LANES);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(LANES).zip(cb.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f32 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f32>() + tail
}

/// Angle in degrees between `a - p` and `b - p`.
pub fn angle_between(p: &[f32], a: &[f32], b: &[f32]) -> Result<f32> {
    if p.len() != a.len() || p.len() != b.len() {
        return Err(usage!("dimension mismatch in angle_between"));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for i in 0..p.len() {
        let u = (a[i] - p[i]) as f64;
        let v = (b[i] - p[i]) as f64;
        dot += u * v;
        na += u * u;
        nb += v * v;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "zero-length difference vector in angle computation".into(),
        ));
    }
    let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees() as f32)
}
