//! Labeled point clouds: in-memory type, ASCII I/O, synthetic room
//! scenes, and column cropping for training.

mod column;
mod io;
mod scene;

pub use column::{sample_column, ColumnSample};
pub use io::save_labels;
pub use scene::{generate_scene, BoxObject, SceneSpec};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Points with per-point RGB colors (each channel in [0, 1]) and integer
/// class labels in `[0, class_count)`.
#[derive(Debug, Clone)]
pub struct LabeledCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledCloud {
    pub fn new(
        positions: Vec<Vec3>,
        colors: Vec<Vec3>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<LabeledCloud> {
        let cloud = LabeledCloud {
            positions,
            colors,
            labels,
            class_count,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != self.len() || self.labels.len() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled cloud",
                lhs: vec![self.len()],
                rhs: vec![self.colors.len(), self.labels.len()],
            });
        }
        if self.class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("position {i}: {p:?}")));
            }
        }
        for (i, c) in self.colors.iter().enumerate() {
            if !c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "color {i} out of [0,1]: {c:?}"
                )));
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.class_count {
                return Err(Error::ClassCountMismatch {
                    expected: self.class_count,
                    actual: l + 1,
                });
            }
            let _ = i;
        }
        Ok(())
    }

    /// New cloud holding the rows named by `indices` (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> LabeledCloud {
        LabeledCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_keeps_rows_aligned() {
        let cloud = LabeledCloud::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0.1; 3], [0.2; 3], [0.3; 3]],
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        let sub = cloud.subset(&[2, 0, 2]);
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.positions[0], [2.0, 0.0, 0.0]);
        assert_eq!(sub.labels, vec![0, 0, 0]);
        assert_eq!(sub.colors[1], [0.1; 3]);
    }

    #[test]
    fn validate_rejects_bad_labels_and_colors() {
        assert!(LabeledCloud::new(vec![[0.0; 3]], vec![[0.5; 3]], vec![2], 2).is_err());
        assert!(LabeledCloud::new(vec![[0.0; 3]], vec![[1.5; 3]], vec![0], 1).is_err());
        assert!(LabeledCloud::new(vec![[f64::NAN; 3]], vec![[0.5; 3]], vec![0], 1).is_err());
    }
}
