//! Boundary mining, label-distribution propagation, and the contrastive
//! boundary loss.
//!
//! A boundary point has a differently-labeled point within a fixed
//! radius.  Ground-truth labels follow the point cloud down the encoder
//! as per-class distributions (mean over nearest parents), so every
//! resolution has hard labels (argmax) and its own boundary mask.  The
//! contrastive loss then pulls each boundary point's feature toward its
//! same-label neighbors and away from the rest.

use crate::autodiff::{Graph, Value};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::spatial::{NeighborTable, SpatialIndex};

/// Per-point boundary flags for one stage.
pub type BoundaryMask = Vec<bool>;

/// Mining radius in meters.
pub const DEFAULT_BOUNDARY_RADIUS: f64 = 0.1;
/// Nearest-parent count for label propagation.
pub const DEFAULT_PROPAGATION_K: usize = 16;

/// Flags every point with a differently-labeled point within `radius`
/// (the point itself never counts, coincident duplicates do).
pub fn mine_boundaries(
    positions: &[Vec3],
    hard_labels: &[usize],
    radius: f64,
) -> Result<BoundaryMask> {
    if positions.len() != hard_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} positions with {} labels",
            positions.len(),
            hard_labels.len()
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "boundary radius must be positive, got {radius}"
        )));
    }
    let index = SpatialIndex::build(positions)?;
    let rows = index.radius_neighbors_self(radius)?;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().any(|&j| hard_labels[j as usize] != hard_labels[i]))
        .collect())
}

/// Row-major one-hot distributions (`n x class_count`).
pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; labels.len() * class_count];
    for (i, &label) in labels.iter().enumerate() {
        if label >= class_count {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {class_count} classes"
            )));
        }
        out[i * class_count + label] = 1.0;
    }
    Ok(out)
}

/// Each child point's distribution becomes the mean of its `k` nearest
/// parents' distributions.  Chain calls to walk down the stages.
pub fn propagate_label_distributions(
    parent_positions: &[Vec3],
    parent_dist: &[f64],
    child_positions: &[Vec3],
    k: usize,
) -> Result<Vec<f64>> {
    let np = parent_positions.len();
    if np == 0 || parent_dist.len() % np != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} distribution values do not tile {np} parents",
            parent_dist.len()
        )));
    }
    if k > np {
        return Err(Error::InvalidArgument(format!(
            "propagation k={k} exceeds parent count {np}"
        )));
    }
    let c = parent_dist.len() / np;
    let index = SpatialIndex::build(parent_positions)?;
    let table = index.knn(child_positions, k)?;
    let mut out = vec![0.0; child_positions.len() * c];
    for i in 0..child_positions.len() {
        for &j in table.row(i) {
            let src = &parent_dist[j as usize * c..(j as usize + 1) * c];
            for ch in 0..c {
                out[i * c + ch] += src[ch];
            }
        }
        for ch in 0..c {
            out[i * c + ch] /= k as f64;
        }
    }
    Ok(out)
}

/// Argmax per distribution row; ties resolve to the lower class index.
pub fn argmax_labels(dist: &[f64], class_count: usize) -> Result<Vec<usize>> {
    if class_count == 0 || dist.len() % class_count != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} distribution values do not tile {class_count} classes",
            dist.len()
        )));
    }
    Ok(dist
        .chunks(class_count)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Counts from one contrastive-loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CblDiagnostics {
    /// Boundary points contributing to the mean.
    pub scored: usize,
    /// Boundary points skipped for lack of a same-label neighbor.
    pub skipped: usize,
}

/// Contrastive boundary loss over a prebuilt neighbor table.  Table
/// entries equal to their own row index (self-references) are masked
/// out.  Per boundary point the ratio of same-label to total neighbor
/// similarity `exp(-||F_i - F_j|| / tau)` enters as `-log`, averaged
/// over boundary points that have at least one same-label neighbor.
pub fn cbl_loss_from_table(
    g: &Graph,
    features: Value,
    table: &NeighborTable,
    hard_labels: &[usize],
    mask: &[bool],
    tau: f64,
) -> Result<(Value, CblDiagnostics)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let shape = g.shape(features);
    if shape.len() != 2 || shape[0] != hard_labels.len() || mask.len() != hard_labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cbl_loss",
            lhs: shape,
            rhs: vec![hard_labels.len(), mask.len()],
        });
    }
    if table.len() != hard_labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cbl_loss table",
            lhs: vec![table.len()],
            rhs: vec![hard_labels.len()],
        });
    }
    let k = table.k();

    let mut anchors = Vec::new();
    let mut diag = CblDiagnostics::default();
    for i in 0..table.len() {
        if !mask[i] {
            continue;
        }
        let row = table.row(i);
        let has_positive = row
            .iter()
            .any(|&j| j as usize != i && hard_labels[j as usize] == hard_labels[i]);
        if has_positive {
            anchors.push(i);
        } else {
            diag.skipped += 1;
        }
    }
    diag.scored = anchors.len();
    if anchors.is_empty() {
        return Ok((g.scalar(0.0), diag));
    }

    let m = anchors.len();
    let mut anchor_rep = Vec::with_capacity(m * k);
    let mut neighbor_tab = Vec::with_capacity(m * k);
    let mut valid = Vec::with_capacity(m * k);
    let mut positive = Vec::with_capacity(m * k);
    for &i in &anchors {
        for &j in table.row(i) {
            anchor_rep.push(i as u32);
            neighbor_tab.push(j);
            let is_self = j as usize == i;
            valid.push(if is_self { 0.0 } else { 1.0 });
            positive.push(if !is_self && hard_labels[j as usize] == hard_labels[i] {
                1.0
            } else {
                0.0
            });
        }
    }

    let fi = g.gather_rows(features, &anchor_rep, k)?;
    let fj = g.gather_rows(features, &neighbor_tab, k)?;
    let dist = g.sqrt(g.reduce_sum(g.square(g.sub(fi, fj)?), 2)?);
    let sim = g.exp(g.scale(dist, -1.0 / tau));
    let valid = g.leaf(vec![m, k], valid)?;
    let positive = g.leaf(vec![m, k], positive)?;
    let den = g.reduce_sum(g.mul(sim, valid)?, 1)?;
    let num = g.reduce_sum(g.mul(sim, positive)?, 1)?;
    let per_point = g.sub(g.log(num), g.log(den))?;
    let loss = g.scale(g.reduce_mean(per_point, 0)?, -1.0);
    Ok((loss, diag))
}

/// Contrastive boundary loss with a fresh k-nearest-neighbor query over
/// `positions` (the query point itself is removed from its own row).
pub fn cbl_loss(
    g: &Graph,
    features: Value,
    positions: &[Vec3],
    hard_labels: &[usize],
    mask: &[bool],
    k: usize,
    tau: f64,
) -> Result<(Value, CblDiagnostics)> {
    if positions.len() != hard_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} positions with {} labels",
            positions.len(),
            hard_labels.len()
        )));
    }
    let index = SpatialIndex::build(positions)?;
    let with_self = index.knn(positions, (k + 1).min(positions.len()))?;
    let mut indices = Vec::with_capacity(positions.len() * k);
    let mut distances = Vec::with_capacity(positions.len() * k);
    for i in 0..positions.len() {
        let mut kept = 0;
        for (&j, &d) in with_self.row(i).iter().zip(with_self.row_distances(i)) {
            if j as usize == i || kept == k {
                continue;
            }
            indices.push(j);
            distances.push(d);
            kept += 1;
        }
        if kept < k {
            return Err(Error::InvalidArgument(format!(
                "cbl k={k} needs {k} non-self neighbors, point {i} has {kept}"
            )));
        }
    }
    let table = NeighborTable::from_rows(positions.len(), k, indices, distances)?;
    cbl_loss_from_table(g, features, &table, hard_labels, mask, tau)
}
