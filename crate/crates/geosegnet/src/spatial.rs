//! Exact spatial queries over small point sets.
//!
//! [`SpatialIndex`] is a bucketed k-d tree giving exact k-nearest-neighbor
//! and radius queries.  Distance ties are broken by the smaller original
//! point index, so query results are fully deterministic.  All comparisons
//! use squared distances internally; reported distances are Euclidean.
//!
//! [`farthest_point_sample`] implements greedy max-min subsampling with a
//! seeded random first pick.

use crate::error::{Error, Result};
use crate::geom::{dist2, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

enum Node {
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        start: usize,
        len: usize,
    },
}

/// k-d tree over a fixed set of points.
pub struct SpatialIndex {
    points: Vec<Vec3>,
    /// Permutation of point indices; leaves reference contiguous runs.
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

/// Dense neighbor table: `k` neighbors for each of `len` query points,
/// each row sorted by (distance, index).
#[derive(Debug, Clone)]
pub struct NeighborTable {
    len: usize,
    k: usize,
    indices: Vec<u32>,
    distances: Vec<f64>,
}

impl NeighborTable {
    /// Builds a table from raw row-major `len x k` indices and matching
    /// distances.  Useful for hand-built neighborhoods (e.g. selecting a
    /// fixed parent per point, or repeating an anchor row).
    pub fn from_rows(
        len: usize,
        k: usize,
        indices: Vec<u32>,
        distances: Vec<f64>,
    ) -> Result<NeighborTable> {
        if indices.len() != len * k || distances.len() != len * k {
            return Err(Error::ShapeMismatch {
                op: "neighbor table from_rows",
                lhs: vec![len, k],
                rhs: vec![indices.len(), distances.len()],
            });
        }
        Ok(NeighborTable {
            len,
            k,
            indices,
            distances,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Joins two tables over the same query set along the neighbor axis;
    /// `self`'s entries come first in every row.
    pub fn concat(&self, other: &NeighborTable) -> Result<NeighborTable> {
        if self.len != other.len {
            return Err(Error::ShapeMismatch {
                op: "neighbor table concat",
                lhs: vec![self.len, self.k],
                rhs: vec![other.len, other.k],
            });
        }
        let k = self.k + other.k;
        let mut indices = Vec::with_capacity(self.len * k);
        let mut distances = Vec::with_capacity(self.len * k);
        for i in 0..self.len {
            indices.extend_from_slice(self.row(i));
            indices.extend_from_slice(other.row(i));
            distances.extend_from_slice(self.row_distances(i));
            distances.extend_from_slice(other.row_distances(i));
        }
        Ok(NeighborTable {
            len: self.len,
            k,
            indices,
            distances,
        })
    }
}

/// Max-heap entry ordered by (squared distance, index); the heap top is
/// the current worst candidate.
#[derive(PartialEq)]
struct Cand {
    d2: f64,
    idx: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .partial_cmp(&other.d2)
            .unwrap()
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    /// Builds the index.  Errors on an empty or non-finite input.
    pub fn build(points: &[Vec3]) -> Result<SpatialIndex> {
        if points.is_empty() {
            return Err(Error::InvalidArgument(
                "spatial index needs at least one point".into(),
            ));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("point {i}: {p:?}")));
            }
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        let n = points.len();
        index.root = index.split(0, n);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn split(&mut self, start: usize, len: usize) -> usize {
        if len <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, len });
            return self.nodes.len() - 1;
        }
        // Split on the dimension with the largest extent; split position is
        // the median so the tree stays balanced.
        let slice = &self.order[start..start + len];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice {
            let p = self.points[i as usize];
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let mut dim = 0;
        for d in 1..3 {
            if hi[d] - lo[d] > hi[dim] - lo[dim] {
                dim = d;
            }
        }
        let mid = len / 2;
        let points = &self.points;
        self.order[start..start + len].select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][dim]
                .partial_cmp(&points[b as usize][dim])
                .unwrap()
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[start + mid] as usize][dim];
        let left = self.split(start, mid);
        let right = self.split(start + mid, len - mid);
        self.nodes.push(Node::Split {
            dim,
            value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    fn knn_one(&self, q: Vec3, k: usize, heap: &mut BinaryHeap<Cand>) {
        heap.clear();
        self.knn_visit(self.root, q, k, heap);
    }

    fn knn_visit(&self, node: usize, q: Vec3, k: usize, heap: &mut BinaryHeap<Cand>) {
        match &self.nodes[node] {
            Node::Leaf { start, len } => {
                for &idx in &self.order[*start..*start + *len] {
                    let cand = Cand {
                        d2: dist2(q, self.points[idx as usize]),
                        idx,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.knn_visit(near, q, k, heap);
                // The far side may still hold an equidistant point with a
                // smaller index, so only prune on strict inequality.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.knn_visit(far, q, k, heap);
                }
            }
        }
    }

    /// Exact k nearest neighbors for each query point.  Queries against the
    /// indexed set include the query point itself.  Errors when `k` exceeds
    /// the number of indexed points.
    pub fn knn(&self, queries: &[Vec3], k: usize) -> Result<NeighborTable> {
        if k == 0 || k > self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "knn k={} out of range for {} indexed points",
                k,
                self.points.len()
            )));
        }
        let mut indices = vec![0u32; queries.len() * k];
        let mut distances = vec![0.0; queries.len() * k];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for (qi, q) in queries.iter().enumerate() {
            if !q.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("query {qi}: {q:?}")));
            }
            self.knn_one(*q, k, &mut heap);
            let sorted = std::mem::take(&mut heap).into_sorted_vec();
            for (j, cand) in sorted.iter().enumerate() {
                indices[qi * k + j] = cand.idx;
                distances[qi * k + j] = cand.d2.sqrt();
            }
            heap = BinaryHeap::with_capacity(k + 1);
        }
        Ok(NeighborTable {
            len: queries.len(),
            k,
            indices,
            distances,
        })
    }

    fn radius_visit(&self, node: usize, q: Vec3, r2: f64, out: &mut Vec<(f64, u32)>) {
        match &self.nodes[node] {
            Node::Leaf { start, len } => {
                for &idx in &self.order[*start..*start + *len] {
                    let d2 = dist2(q, self.points[idx as usize]);
                    if d2 <= r2 {
                        out.push((d2, idx));
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.radius_visit(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_visit(far, q, r2, out);
                }
            }
        }
    }

    /// All indexed points within `radius` of each query (inclusive), each
    /// row sorted by (distance, index).
    pub fn radius_neighbors(&self, queries: &[Vec3], radius: f64) -> Result<Vec<Vec<u32>>> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!("radius {radius} invalid")));
        }
        let r2 = radius * radius;
        let mut rows = Vec::with_capacity(queries.len());
        let mut buf: Vec<(f64, u32)> = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            if !q.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("query {qi}: {q:?}")));
            }
            buf.clear();
            self.radius_visit(self.root, *q, r2, &mut buf);
            buf.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            rows.push(buf.iter().map(|&(_, i)| i).collect());
        }
        Ok(rows)
    }

    /// Radius query of the indexed set against itself; row `i` never
    /// contains index `i` (duplicate points under other indices remain).
    pub fn radius_neighbors_self(&self, radius: f64) -> Result<Vec<Vec<u32>>> {
        let mut rows = self.radius_neighbors(&self.points.clone(), radius)?;
        for (i, row) in rows.iter_mut().enumerate() {
            row.retain(|&j| j as usize != i);
        }
        Ok(rows)
    }
}

/// Greedy farthest point sampling.
///
/// The first pick is drawn uniformly from `points` using `seed`; each
/// following pick maximizes the minimum distance to the points already
/// selected, ties broken by the smaller index.  Returns `m` distinct
/// indices into `points`.
pub fn farthest_point_sample(points: &[Vec3], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > points.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..points.len());
    let mut selected = Vec::with_capacity(m);
    selected.push(first);
    let mut min_d2: Vec<f64> = points.iter().map(|&p| dist2(p, points[first])).collect();
    while selected.len() < m {
        let mut best = 0;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best = i;
                best_d2 = d2;
            }
        }
        selected.push(best);
        for (i, d2) in min_d2.iter_mut().enumerate() {
            let nd = dist2(points[i], points[best]);
            if nd < *d2 {
                *d2 = nd;
            }
        }
    }
    Ok(selected)
}
