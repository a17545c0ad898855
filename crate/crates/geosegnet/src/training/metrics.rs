//! Segmentation metrics over a confusion matrix, with boundary-restricted
//! variants.

use crate::error::{Error, Result};

/// Ground-truth-major confusion counts: `count(gt, pred)` is stored at
/// `gt * class_count + pred`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.class_count + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.class_count || pred >= self.class_count {
            return Err(Error::ClassCountMismatch {
                expected: self.class_count,
                actual: gt.max(pred) + 1,
            });
        }
        self.counts[gt * self.class_count + pred] += 1;
        Ok(())
    }

    pub fn tally(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::InvalidArgument(format!(
                "label slices differ in length: {} vs {}",
                gt.len(),
                pred.len()
            )));
        }
        for (&t, &p) in gt.iter().zip(pred) {
            self.record(t, p)?;
        }
        Ok(())
    }

    /// Tallies only the entries where `mask` is true.
    pub fn tally_masked(&mut self, gt: &[usize], pred: &[usize], mask: &[bool]) -> Result<()> {
        if gt.len() != pred.len() || gt.len() != mask.len() {
            return Err(Error::InvalidArgument(format!(
                "label/mask slices differ in length: {} vs {} vs {}",
                gt.len(),
                pred.len(),
                mask.len()
            )));
        }
        for i in 0..gt.len() {
            if mask[i] {
                self.record(gt[i], pred[i])?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_count != self.class_count {
            return Err(Error::ClassCountMismatch {
                expected: self.class_count,
                actual: other.class_count,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Fraction of points classified correctly: trace over total.  An
    /// empty matrix scores 0.
    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.class_count).map(|c| self.count(c, c)).sum();
        trace as f64 / total as f64
    }

    /// Intersection over union for one class, `None` when the class
    /// appears in neither ground truth nor prediction.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..self.class_count {
            if other != class {
                fp += self.count(other, class);
                fn_ += self.count(class, other);
            }
        }
        let union = tp + fp + fn_;
        if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        }
    }

    /// Mean IoU over classes present in ground truth or prediction;
    /// classes absent from both are excluded from the mean.
    pub fn mean_iou(&self) -> f64 {
        self.mean_iou_with(false)
    }

    /// `score_absent_as_zero` switches to the stricter convention where
    /// classes absent from both sides count as 0 and the mean divides by
    /// the full class count.
    pub fn mean_iou_with(&self, score_absent_as_zero: bool) -> f64 {
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.class_count {
            if let Some(iou) = self.class_iou(c) {
                sum += iou;
                present += 1;
            }
        }
        let denom = if score_absent_as_zero {
            self.class_count
        } else {
            present
        };
        if denom == 0 {
            0.0
        } else {
            sum / denom as f64
        }
    }

    /// Mean per-class recall over classes present in the ground truth.
    pub fn mean_accuracy(&self) -> f64 {
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.class_count {
            let gt_total: u64 = (0..self.class_count).map(|p| self.count(c, p)).sum();
            if gt_total > 0 {
                sum += self.count(c, c) as f64 / gt_total as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }
}

/// Evaluation result: the full confusion matrix plus the same counts
/// restricted to mined boundary points.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    pub boundary_confusion: ConfusionMatrix,
}

impl Metrics {
    pub fn new(class_count: usize) -> Metrics {
        Metrics {
            confusion: ConfusionMatrix::new(class_count),
            boundary_confusion: ConfusionMatrix::new(class_count),
        }
    }

    pub fn merge(&mut self, other: &Metrics) -> Result<()> {
        self.confusion.merge(&other.confusion)?;
        self.boundary_confusion.merge(&other.boundary_confusion)
    }

    pub fn oa(&self) -> f64 {
        self.confusion.overall_accuracy()
    }

    pub fn miou(&self) -> f64 {
        self.confusion.mean_iou()
    }

    pub fn macc(&self) -> f64 {
        self.confusion.mean_accuracy()
    }

    pub fn boundary_miou(&self) -> f64 {
        self.boundary_confusion.mean_iou()
    }
}
