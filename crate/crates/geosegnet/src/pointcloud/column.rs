//! Vertical column cropping: the training unit is a fixed-size sample of
//! points from a square x/y section around a randomly chosen point.

use super::LabeledCloud;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub struct ColumnSample {
    pub cloud: LabeledCloud,
    /// True when the section held fewer than the requested points and
    /// sampling fell back to drawing with replacement.
    pub with_replacement: bool,
    /// x/y center of the section.
    pub center: [f64; 2],
}

/// Draws `n` points from a `section` x `section` column centered on a
/// uniformly chosen point of `cloud`.  Points are drawn without
/// replacement, unless the column holds fewer than `n` points, in which
/// case they are drawn with replacement.
pub fn sample_column(
    cloud: &LabeledCloud,
    n: usize,
    section: f64,
    seed: u64,
) -> Result<ColumnSample> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot sample an empty cloud".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("column size must be positive".into()));
    }
    if !(section > 0.0) {
        return Err(Error::InvalidArgument(format!("section {section} invalid")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let center_point = cloud.positions[rng.gen_range(0..cloud.len())];
    let (cx, cy) = (center_point[0], center_point[1]);
    let half = section / 2.0;
    let candidates: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = cloud.positions[i];
            (p[0] - cx).abs() <= half && (p[1] - cy).abs() <= half
        })
        .collect();
    debug_assert!(!candidates.is_empty(), "center point is inside its own column");

    let (indices, with_replacement) = if candidates.len() >= n {
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), n)
            .iter()
            .map(|i| candidates[i])
            .collect();
        picks.sort_unstable();
        (picks, false)
    } else {
        let picks = (0..n)
            .map(|_| candidates[rng.gen_range(0..candidates.len())])
            .collect();
        (picks, true)
    };
    Ok(ColumnSample {
        cloud: cloud.subset(&indices),
        with_replacement,
        center: [cx, cy],
    })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneSpec};
    use super::*;

    #[test]
    fn column_bounds_and_exact_count() {
        let spec = SceneSpec {
            extent: [6.0, 6.0, 3.0],
            density: 1500.0, // a 2 m column must hold > 4096 points
            ..SceneSpec::default()
        };
        let cloud = generate_scene(&spec).unwrap();
        let sample = sample_column(&cloud, 4096, 2.0, 3).unwrap();
        assert_eq!(sample.cloud.len(), 4096);
        assert!(!sample.with_replacement);
        let [cx, cy] = sample.center;
        for p in &sample.cloud.positions {
            assert!((p[0] - cx).abs() <= 1.0 + 1e-12);
            assert!((p[1] - cy).abs() <= 1.0 + 1e-12);
        }
        // Without replacement: all rows distinct (positions generically
        // unique in a random scene).
        let mut seen = sample.cloud.positions.clone();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 4096);
    }

    #[test]
    fn short_column_falls_back_to_replacement() {
        let spec = SceneSpec {
            extent: [1.0, 1.0, 1.0],
            density: 30.0,
            ..SceneSpec::default()
        };
        let cloud = generate_scene(&spec).unwrap();
        assert!(cloud.len() < 100);
        let sample = sample_column(&cloud, 100, 10.0, 1).unwrap();
        assert_eq!(sample.cloud.len(), 100);
        assert!(sample.with_replacement);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = SceneSpec::default();
        let cloud = generate_scene(&spec).unwrap();
        let a = sample_column(&cloud, 256, 2.0, 77).unwrap();
        let b = sample_column(&cloud, 256, 2.0, 77).unwrap();
        assert_eq!(a.cloud.positions, b.cloud.positions);
        assert_eq!(a.center, b.center);
    }

    #[test]
    fn degenerate_requests_error() {
        let cloud = generate_scene(&SceneSpec::default()).unwrap();
        assert!(sample_column(&cloud, 0, 2.0, 0).is_err());
        assert!(sample_column(&cloud, 10, 0.0, 0).is_err());
        assert!(sample_column(&cloud, 10, -1.0, 0).is_err());
    }
}
