//! Per-point geometric descriptors computed over neighbor tables.
//!
//! * Covariance eigenvalues of the local neighborhood (rigid-motion
//!   invariant; also used to group neighbors in eigenvalue space).
//! * Relative angles and distances of neighbors against the neighborhood
//!   centroid direction (invariant to rotation about z).
//! * Local density as a volume ratio against the cloud's cover sphere.
//! * Color difference/variance statistics.
//!
//! Every function takes an explicit [`NeighborTable`], so callers control
//! the neighborhood definition (Euclidean KNN, eigen-space KNN, or a
//! concatenation of both).

use crate::error::{Error, Result};
use crate::geom::{add, dist2, norm, scale, sub, Vec3};
use crate::spatial::{NeighborTable, SpatialIndex};

/// Sorted (descending) covariance eigenvalues per point.
#[derive(Debug, Clone)]
pub struct EigenFeatures {
    pub lambdas: Vec<[f64; 3]>,
}

/// Eigenvalues of a symmetric 3x3 matrix, descending.
///
/// Closed form: the characteristic cubic is solved trigonometrically
/// (shift by the mean eigenvalue, scale to a unit-trace deviator, then the
/// three roots fall out of a single arccos).  For positive semidefinite
/// input tiny negative roots from rounding are clamped to zero.
pub fn sym3_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let trace = a[0][0] + a[1][1] + a[2][2];
    let q = trace / 3.0;
    let mut eig = if p1 == 0.0 {
        // Already diagonal.
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| y.partial_cmp(x).unwrap());
        d
    } else {
        let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = [
            [(a[0][0] - q) / p, a[0][1] / p, a[0][2] / p],
            [a[0][1] / p, (a[1][1] - q) / p, a[1][2] / p],
            [a[0][2] / p, a[1][2] / p, (a[2][2] - q) / p],
        ];
        let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[1][2])
            - b[0][1] * (b[0][1] * b[2][2] - b[1][2] * b[0][2])
            + b[0][2] * (b[0][1] * b[1][2] - b[1][1] * b[0][2]);
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        // phi lies in [0, pi/3], so l1 is the largest root and l3 (at
        // phi + 2pi/3) the smallest.
        let phi = r.acos() / 3.0;
        let l1 = q + 2.0 * p * phi.cos();
        let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
        [l1, 3.0 * q - l1 - l3, l3]
    };
    for l in eig.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    eig
}

/// Eigenvalues of the unnormalized neighborhood covariance
/// `C = sum_j (x_j - p_i)(x_j - p_i)^T` for each point's table row.
pub fn local_covariance_eigenvalues(
    positions: &[Vec3],
    table: &NeighborTable,
) -> Result<EigenFeatures> {
    if table.len() != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "local_covariance_eigenvalues",
            lhs: vec![positions.len()],
            rhs: vec![table.len()],
        });
    }
    let mut lambdas = Vec::with_capacity(positions.len());
    for (i, &p) in positions.iter().enumerate() {
        let mut c = [[0.0f64; 3]; 3];
        for &j in table.row(i) {
            let o = sub(positions[j as usize], p);
            for r in 0..3 {
                for s in r..3 {
                    c[r][s] += o[r] * o[s];
                }
            }
        }
        c[1][0] = c[0][1];
        c[2][0] = c[0][2];
        c[2][1] = c[1][2];
        lambdas.push(sym3_eigenvalues(&c));
    }
    Ok(EigenFeatures { lambdas })
}

/// KNN over points embedded at their eigenvalue triples; groups points
/// whose local neighborhoods have a similar shape regardless of where
/// they sit in the scene.  Rows include the query point itself.
pub fn eigenspace_knn(eigen: &EigenFeatures, k: usize) -> Result<NeighborTable> {
    let index = SpatialIndex::build(&eigen.lambdas)?;
    index.knn(&eigen.lambdas, k)
}

/// Neighbor geometry relative to the local centroid direction.
///
/// For each neighbor offset `o`: distance `dis = |o|`, azimuth
/// `phi = atan2(o_y, o_x)`, elevation `theta = atan2(o_z, |o_xy|)`.  The
/// same two angles of the centroid offset give per-point `alpha`/`beta`,
/// and the stored relative angles are `phi - alpha` / `theta - beta`
/// wrapped into (-pi, pi].  A zero offset contributes `phi = theta = 0`.
#[derive(Debug, Clone)]
pub struct GcfrFeatures {
    pub len: usize,
    pub k: usize,
    /// Row-major `len x k`.
    pub dis: Vec<f64>,
    pub phi_rel: Vec<f64>,
    pub theta_rel: Vec<f64>,
    /// Per-point centroid azimuth / elevation.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

fn azimuth_elevation(o: Vec3) -> (f64, f64) {
    let phi = o[1].atan2(o[0]);
    let theta = o[2].atan2((o[0] * o[0] + o[1] * o[1]).sqrt());
    (phi, theta)
}

pub fn gcfr_features(positions: &[Vec3], table: &NeighborTable) -> Result<GcfrFeatures> {
    if table.len() != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "gcfr_features",
            lhs: vec![positions.len()],
            rhs: vec![table.len()],
        });
    }
    let (n, k) = (table.len(), table.k());
    let mut out = GcfrFeatures {
        len: n,
        k,
        dis: vec![0.0; n * k],
        phi_rel: vec![0.0; n * k],
        theta_rel: vec![0.0; n * k],
        alpha: vec![0.0; n],
        beta: vec![0.0; n],
    };
    for (i, &p) in positions.iter().enumerate() {
        let row = table.row(i);
        let mut centroid = [0.0; 3];
        for &j in row {
            centroid = add(centroid, positions[j as usize]);
        }
        centroid = scale(centroid, 1.0 / k as f64);
        let (alpha, beta) = azimuth_elevation(sub(centroid, p));
        out.alpha[i] = alpha;
        out.beta[i] = beta;
        for (slot, &j) in row.iter().enumerate() {
            let o = sub(positions[j as usize], p);
            let d = norm(o);
            out.dis[i * k + slot] = d;
            // A zero offset (the point itself, or an exact duplicate) has
            // no direction; leave both relative angles at 0.
            if d > 0.0 {
                let (phi, theta) = azimuth_elevation(o);
                out.phi_rel[i * k + slot] = crate::geom::wrap_angle(phi - alpha);
                out.theta_rel[i * k + slot] = crate::geom::wrap_angle(theta - beta);
            }
        }
    }
    Ok(out)
}

/// Smallest sphere centered at the coordinate centroid that covers all
/// points (an O(N) cover sphere, not the minimal enclosing sphere).
pub fn bounding_sphere(positions: &[Vec3]) -> Result<(Vec3, f64)> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("bounding sphere of no points".into()));
    }
    let center = crate::geom::centroid(positions);
    let radius = positions
        .iter()
        .map(|&p| dist2(p, center).sqrt())
        .fold(0.0, f64::max);
    Ok((center, radius))
}

/// Volume ratio of each point's local sphere against the global sphere.
#[derive(Debug, Clone)]
pub struct LocalDensity {
    /// `(local_radius / global_radius)^3` per point.
    pub ratio: Vec<f64>,
    /// True where the local radius is zero (all neighbors coincide with
    /// the point); the ratio is 0 there.
    pub degenerate: Vec<bool>,
}

/// The local radius is the distance to the farthest table neighbor; the
/// global sphere is typically [`bounding_sphere`] of the whole cloud.
pub fn local_density(
    table: &NeighborTable,
    global_radius: f64,
) -> Result<LocalDensity> {
    if !(global_radius > 0.0) || !global_radius.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "global radius must be positive, got {global_radius}"
        )));
    }
    let mut ratio = Vec::with_capacity(table.len());
    let mut degenerate = Vec::with_capacity(table.len());
    for i in 0..table.len() {
        let local = table
            .row_distances(i)
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        degenerate.push(local == 0.0);
        ratio.push((local / global_radius).powi(3));
    }
    Ok(LocalDensity { ratio, degenerate })
}

/// Color statistics over neighbor rows.
#[derive(Debug, Clone)]
pub struct ColorFeatures {
    pub len: usize,
    pub k: usize,
    /// `len x k x 6`: per neighbor, (c_j - c_i) then c_i.
    pub per_neighbor: Vec<f64>,
    /// `len x 3`: mean over the row of (c_i - c_j)^2, per channel.
    pub variance: Vec<f64>,
    /// `len x k x 9`: per-neighbor 6 channels with the point's variance
    /// broadcast onto every neighbor row.
    pub combined: Vec<f64>,
}

pub fn color_features(colors: &[Vec3], table: &NeighborTable) -> Result<ColorFeatures> {
    if table.len() != colors.len() {
        return Err(Error::ShapeMismatch {
            op: "color_features",
            lhs: vec![colors.len()],
            rhs: vec![table.len()],
        });
    }
    let (n, k) = (table.len(), table.k());
    let mut per_neighbor = vec![0.0; n * k * 6];
    let mut variance = vec![0.0; n * 3];
    let mut combined = vec![0.0; n * k * 9];
    for i in 0..n {
        let ci = colors[i];
        let row = table.row(i);
        for (slot, &j) in row.iter().enumerate() {
            let cj = colors[j as usize];
            let base = (i * k + slot) * 6;
            for ch in 0..3 {
                per_neighbor[base + ch] = cj[ch] - ci[ch];
                per_neighbor[base + 3 + ch] = ci[ch];
                variance[i * 3 + ch] += (ci[ch] - cj[ch]).powi(2);
            }
        }
        for ch in 0..3 {
            variance[i * 3 + ch] /= k as f64;
        }
        for slot in 0..k {
            let src = (i * k + slot) * 6;
            let dst = (i * k + slot) * 9;
            combined[dst..dst + 6].copy_from_slice(&per_neighbor[src..src + 6]);
            combined[dst + 6..dst + 9].copy_from_slice(&variance[i * 3..i * 3 + 3]);
        }
    }
    Ok(ColorFeatures {
        len: n,
        k,
        per_neighbor,
        variance,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::SpatialIndex;

    fn table_for(positions: &[Vec3], k: usize) -> NeighborTable {
        SpatialIndex::build(positions)
            .unwrap()
            .knn(positions, k)
            .unwrap()
    }

    #[test]
    fn eigenvalues_of_symmetric_pair() {
        // Offsets (+-1, 0, 0) give C = diag(2, 0, 0).
        let positions = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let table = table_for(&positions, 3);
        let eig = local_covariance_eigenvalues(&positions, &table).unwrap();
        let l = eig.lambdas[0];
        assert!((l[0] - 2.0).abs() < 1e-12, "{l:?}");
        assert!(l[1].abs() < 1e-12 && l[2].abs() < 1e-12);
    }

    #[test]
    fn sym3_matches_characteristic_polynomial() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..500 {
            // Random PSD matrix via G G^T.
            let g: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut a = [[0.0; 3]; 3];
            for r in 0..3 {
                for s in 0..3 {
                    for t in 0..3 {
                        a[r][s] += g[r * 3 + t] * g[s * 3 + t];
                    }
                }
            }
            let l = sym3_eigenvalues(&a);
            assert!(l[0] >= l[1] && l[1] >= l[2] && l[2] >= 0.0, "{l:?}");
            // The elementary symmetric functions of the roots must match
            // trace, sum of principal 2x2 minors, and determinant.
            let trace = a[0][0] + a[1][1] + a[2][2];
            let minors = a[0][0] * a[1][1] - a[0][1] * a[0][1]
                + a[0][0] * a[2][2]
                - a[0][2] * a[0][2]
                + a[1][1] * a[2][2]
                - a[1][2] * a[1][2];
            let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[1][2])
                - a[0][1] * (a[0][1] * a[2][2] - a[1][2] * a[0][2])
                + a[0][2] * (a[0][1] * a[1][2] - a[1][1] * a[0][2]);
            let scale = trace.abs().max(1.0);
            assert!((l[0] + l[1] + l[2] - trace).abs() < 1e-8 * scale);
            assert!(
                (l[0] * l[1] + l[0] * l[2] + l[1] * l[2] - minors).abs() < 1e-7 * scale * scale
            );
            assert!((l[0] * l[1] * l[2] - det).abs() < 1e-7 * scale * scale * scale);
        }
    }

    #[test]
    fn sym3_degenerate_matrices() {
        assert_eq!(sym3_eigenvalues(&[[0.0; 3]; 3]), [0.0; 3]);
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(sym3_eigenvalues(&id), [1.0; 3]);
        let diag = [[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 3.0]];
        assert_eq!(sym3_eigenvalues(&diag), [5.0, 3.0, 1.0]);
    }

    #[test]
    fn gcfr_single_neighbor_zeroes_relative_angles() {
        // One neighbor: the centroid is that neighbor, so relative angles
        // vanish and only the distance survives.
        let positions = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        let d = 2.0f64.sqrt();
        let table = NeighborTable::from_rows(2, 1, vec![1, 0], vec![d, d]).unwrap();
        let g = gcfr_features(&positions, &table).unwrap();
        assert!((g.dis[0] - d).abs() < 1e-12);
        assert_eq!(g.phi_rel[0], 0.0);
        assert_eq!(g.theta_rel[0], 0.0);
        assert!((g.alpha[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert_eq!(g.beta[0], 0.0);
    }

    #[test]
    fn gcfr_known_angles() {
        // Two symmetric neighbors about the center: centroid lands on the
        // center, so alpha = beta = 0 and relative angles equal raw ones.
        let positions = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]];
        let index = SpatialIndex::build(&positions).unwrap();
        let table = index.knn(&positions, 3).unwrap();
        let g = gcfr_features(&positions, &table).unwrap();
        // Row 0's table is [self, 1, 2] (ties by index).
        assert_eq!(table.row(0), &[0, 1, 2]);
        assert_eq!(g.alpha[0], 0.0); // centroid == center
        let slot1 = 1; // neighbor (1,1,0)
        assert!((g.dis[slot1] - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((g.phi_rel[slot1] - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert_eq!(g.theta_rel[slot1], 0.0);
        // Zero offset (self) contributes zero angles and distance.
        assert_eq!(g.dis[0], 0.0);
        assert_eq!(g.phi_rel[0], 0.0);
        assert_eq!(g.theta_rel[0], 0.0);
    }

    #[test]
    fn density_two_point_cloud_is_eight() {
        // Two points distance d apart: local radius d, global radius d/2,
        // ratio (d / (d/2))^3 = 8 for both points.
        let positions = vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let index = SpatialIndex::build(&positions).unwrap();
        let table = index.knn(&positions, 2).unwrap();
        let (center, radius) = bounding_sphere(&positions).unwrap();
        assert_eq!(center, [1.5, 0.0, 0.0]);
        assert_eq!(radius, 1.5);
        let d = local_density(&table, radius).unwrap();
        assert!((d.ratio[0] - 8.0).abs() < 1e-12);
        assert!((d.ratio[1] - 8.0).abs() < 1e-12);
        assert!(!d.degenerate[0]);
    }

    #[test]
    fn density_degenerate_point_is_zero_and_flagged() {
        let positions = vec![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [2.0, 1.0, 1.0]];
        let index = SpatialIndex::build(&positions).unwrap();
        let table = index.knn(&positions, 2).unwrap();
        // Point 0's two nearest are itself and its duplicate: local radius 0.
        let d = local_density(&table, 1.0).unwrap();
        assert_eq!(d.ratio[0], 0.0);
        assert!(d.degenerate[0]);
        assert!(!d.degenerate[2]);
        assert!(local_density(&table, 0.0).is_err());
    }

    #[test]
    fn color_variance_white_center_black_neighbors() {
        // K = 2 non-self neighbors, white center, black neighbors:
        // variance is exactly (1, 1, 1).
        let colors = vec![[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let table = NeighborTable::from_rows(
            3,
            2,
            vec![1, 2, 0, 2, 0, 1],
            vec![1.0; 6],
        )
        .unwrap();
        let cf = color_features(&colors, &table).unwrap();
        assert_eq!(&cf.variance[0..3], &[1.0, 1.0, 1.0]);
        // Channel layout per neighbor: 3 difference, then 3 center color.
        assert_eq!(&cf.per_neighbor[0..3], &[-1.0, -1.0, -1.0]);
        assert_eq!(&cf.per_neighbor[3..6], &[1.0, 1.0, 1.0]);
        // Combined rows append the point's variance after those 6.
        assert_eq!(&cf.combined[0..6], &cf.per_neighbor[0..6]);
        assert_eq!(&cf.combined[6..9], &[1.0, 1.0, 1.0]);
        // A black point's variance over (black, white) rows: mean of 0 and 1.
        assert_eq!(&cf.variance[3..6], &[0.5, 0.5, 0.5]);
    }
}
