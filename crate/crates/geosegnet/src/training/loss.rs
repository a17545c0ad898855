//! Multi-stage supervision and the combined training loss.
//!
//! The total loss is the full-resolution cross-entropy, plus the per-stage
//! prediction cross-entropies weighted by `lambda1`, plus the contrastive
//! boundary losses (summed over stages) weighted by `lambda2`.

use crate::autodiff::{Graph, Value};
use crate::boundary::{
    argmax_labels, cbl_loss_from_table, mine_boundaries, one_hot, propagate_label_distributions,
    BoundaryMask, CblDiagnostics, DEFAULT_BOUNDARY_RADIUS, DEFAULT_PROPAGATION_K,
};
use crate::error::{Error, Result};
use crate::network::{NetworkOutput, StageState, STAGES};

/// Scalar components of one training step's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_final: f64,
    pub l_pred: [f64; STAGES],
    pub l_cbl: f64,
    pub total: f64,
}

/// Per-stage supervision targets derived from the ground-truth labels.
#[derive(Debug, Clone)]
pub struct Supervision {
    /// Hard labels per stage: the ground truth at stage 0, argmaxed
    /// propagated distributions below.
    pub stage_labels: Vec<Vec<usize>>,
    /// Boundary masks mined from each stage's hard labels.
    pub stage_masks: Vec<BoundaryMask>,
}

/// Propagates the ground-truth labels down the stage hierarchy as
/// distributions (stored back into the stages), argmaxes them into hard
/// labels, and mines per-stage boundary masks.
pub fn build_supervision(
    stages: &mut [StageState],
    labels: &[usize],
    class_count: usize,
) -> Result<Supervision> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("no stages to supervise".into()));
    }
    if labels.len() != stages[0].len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} stage-0 points",
            labels.len(),
            stages[0].len()
        )));
    }
    let mut stage_labels = Vec::with_capacity(stages.len());
    let mut stage_masks = Vec::with_capacity(stages.len());

    let mut prev_dist = one_hot(labels, class_count)?;
    stages[0].label_distribution = Some(prev_dist.clone());
    stage_masks.push(mine_boundaries(
        &stages[0].positions,
        labels,
        DEFAULT_BOUNDARY_RADIUS,
    )?);
    stage_labels.push(labels.to_vec());

    for n in 1..stages.len() {
        let (head, tail) = stages.split_at_mut(n);
        let parent = &head[n - 1];
        let child = &mut tail[0];
        let k = DEFAULT_PROPAGATION_K.min(parent.len());
        let dist =
            propagate_label_distributions(&parent.positions, &prev_dist, &child.positions, k)?;
        let hard = argmax_labels(&dist, class_count)?;
        stage_masks.push(mine_boundaries(
            &child.positions,
            &hard,
            DEFAULT_BOUNDARY_RADIUS,
        )?);
        child.label_distribution = Some(dist.clone());
        prev_dist = dist;
        stage_labels.push(hard);
    }
    Ok(Supervision {
        stage_labels,
        stage_masks,
    })
}

/// Assembles the differentiable total loss and its scalar report.
///
/// `lambda1 = 0` drops the per-stage term from the graph entirely (the
/// component values are still reported), and likewise `lambda2 = 0` skips
/// building the contrastive losses, so zero weights reduce the total to
/// the plain final cross-entropy exactly.
pub fn multi_stage_loss(
    g: &Graph,
    out: &NetworkOutput,
    stages: &[StageState],
    sup: &Supervision,
    lambda1: f64,
    lambda2: f64,
    tau: f64,
) -> Result<(LossReport, Value, CblDiagnostics)> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be nonnegative, got lambda1={lambda1} lambda2={lambda2}"
        )));
    }
    if stages.len() != STAGES
        || out.stage_logits.len() != STAGES
        || sup.stage_labels.len() != STAGES
    {
        return Err(Error::InvalidArgument(format!(
            "expected {STAGES} stages, got {}/{}/{}",
            stages.len(),
            out.stage_logits.len(),
            sup.stage_labels.len()
        )));
    }

    let l_final = g.cross_entropy(out.final_logits, &sup.stage_labels[0], None)?;
    let mut total = l_final;

    let mut l_pred = [0.0; STAGES];
    let mut pred_sum: Option<Value> = None;
    for n in 0..STAGES {
        let ln = g.cross_entropy(out.stage_logits[n], &sup.stage_labels[n], None)?;
        l_pred[n] = g.scalar_value(ln)?;
        pred_sum = Some(match pred_sum {
            Some(s) => g.add(s, ln)?,
            None => ln,
        });
    }
    if lambda1 > 0.0 {
        total = g.add(total, g.scale(pred_sum.expect("five stages"), lambda1))?;
    }

    let mut l_cbl = 0.0;
    let mut diagnostics = CblDiagnostics::default();
    if lambda2 > 0.0 {
        let mut cbl_sum: Option<Value> = None;
        for n in 0..STAGES {
            let (stage_loss, diag) = cbl_loss_from_table(
                g,
                out.stage_features[n],
                &stages[n].k1_table,
                &sup.stage_labels[n],
                &sup.stage_masks[n],
                tau,
            )?;
            diagnostics.scored += diag.scored;
            diagnostics.skipped += diag.skipped;
            cbl_sum = Some(match cbl_sum {
                Some(s) => g.add(s, stage_loss)?,
                None => stage_loss,
            });
        }
        let cbl_sum = cbl_sum.expect("five stages");
        l_cbl = g.scalar_value(cbl_sum)?;
        total = g.add(total, g.scale(cbl_sum, lambda2))?;
    }

    let report = LossReport {
        l_final: g.scalar_value(l_final)?,
        l_pred,
        l_cbl,
        total: g.scalar_value(total)?,
    };
    Ok((report, total, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_weights_are_rejected() {
        let g = Graph::new();
        let out = NetworkOutput {
            stage_logits: vec![],
            final_logits: g.leaf(vec![1, 2], vec![0.0, 0.0]).unwrap(),
            stage_features: vec![],
            encoder_features: vec![],
        };
        let sup = Supervision {
            stage_labels: vec![],
            stage_masks: vec![],
        };
        let err = multi_stage_loss(&g, &out, &[], &sup, -0.1, 0.0, 1.0);
        assert!(err.is_err());
        let err = multi_stage_loss(&g, &out, &[], &sup, 0.0, -0.1, 1.0);
        assert!(err.is_err());
    }
}
