//! ASCII point file reading and writing.
//!
//! One point per non-comment line: `x y z r g b label`, whitespace
//! separated.  `#` starts a comment, blank lines are skipped.  An optional
//! eighth column (a prediction written by [`save_labels`]) is ignored on
//! load.  Colors may be given in 0-1 or 0-255; if any channel exceeds 1
//! the whole file is treated as 0-255 and rescaled.

use super::LabeledCloud;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use std::fs;
use std::io::Write;
use std::path::Path;

impl LabeledCloud {
    /// Loads a cloud; the class count is the largest label + 1.
    pub fn load(path: impl AsRef<Path>) -> Result<LabeledCloud> {
        Self::load_impl(path.as_ref(), None)
    }

    /// Loads a cloud with a fixed class count; labels must fit under it.
    pub fn load_with_class_count(path: impl AsRef<Path>, class_count: usize) -> Result<LabeledCloud> {
        Self::load_impl(path.as_ref(), Some(class_count))
    }

    fn load_impl(path: &Path, class_count: Option<usize>) -> Result<LabeledCloud> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut positions: Vec<Vec3> = Vec::new();
        let mut colors: Vec<Vec3> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 7 && fields.len() != 8 {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("expected 7 fields (x y z r g b label), got {}", fields.len()),
                ));
            }
            let mut nums = [0.0f64; 6];
            for (i, f) in fields[..6].iter().enumerate() {
                nums[i] = f.parse().map_err(|_| {
                    Error::parse(path, lineno + 1, format!("bad number {f:?}"))
                })?;
                if !nums[i].is_finite() {
                    return Err(Error::parse(path, lineno + 1, format!("non-finite {f:?}")));
                }
            }
            let label: usize = fields[6].parse().map_err(|_| {
                Error::parse(
                    path,
                    lineno + 1,
                    format!("bad label {:?} (want a non-negative integer)", fields[6]),
                )
            })?;
            positions.push([nums[0], nums[1], nums[2]]);
            colors.push([nums[3], nums[4], nums[5]]);
            labels.push(label);
        }
        if positions.is_empty() {
            return Err(Error::parse(path, 0, "no points in file"));
        }
        let max_channel = colors
            .iter()
            .flat_map(|c| c.iter())
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if max_channel > 1.0 {
            for c in colors.iter_mut() {
                for v in c.iter_mut() {
                    *v /= 255.0;
                }
            }
        }
        let class_count = match class_count {
            Some(c) => c,
            None => labels.iter().copied().max().unwrap() + 1,
        };
        LabeledCloud::new(positions, colors, labels, class_count)
    }

    /// Writes `x y z r g b label` lines.  Values round-trip through
    /// [`LabeledCloud::load`] exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_rows(path.as_ref(), None)
    }

    fn write_rows(&self, path: &Path, extra: Option<&[usize]>) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.len() {
            let p = self.positions[i];
            let c = self.colors[i];
            out.push_str(&format!(
                "{} {} {} {} {} {} {}",
                p[0], p[1], p[2], c[0], c[1], c[2], self.labels[i]
            ));
            if let Some(extra) = extra {
                out.push_str(&format!(" {}", extra[i]));
            }
            out.push('\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Writes `x y z r g b gt pred` lines (ground truth, then prediction).
pub fn save_labels(
    cloud: &LabeledCloud,
    predictions: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    if predictions.len() != cloud.len() {
        return Err(Error::ShapeMismatch {
            op: "save_labels",
            lhs: vec![cloud.len()],
            rhs: vec![predictions.len()],
        });
    }
    cloud.write_rows(path.as_ref(), Some(predictions))
}
