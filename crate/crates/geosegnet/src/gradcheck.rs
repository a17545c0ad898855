//! Central-difference verification of analytic gradients.
//!
//! Both checkers rebuild the forward pass from a closure so the graph is
//! fresh for every perturbed evaluation: `f'(x) ~ (f(x+e) - f(x-e)) / 2e`,
//! compared against the backward pass with a floored relative error.

use crate::autodiff::{Graph, ParamStore, Value};
use crate::error::{Error, Result};

/// |a - b| / max(|a|, |b|, 1e-6).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central-difference step.
    pub epsilon: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Cap on elements checked per parameter (0 checks all), taken
    /// evenly spaced so every region of the tensor is sampled.
    pub max_per_param: usize,
}

impl Default for GradCheck {
    fn default() -> GradCheck {
        GradCheck {
            epsilon: 1e-4,
            tolerance: 1e-3,
            max_per_param: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and element index of the worst comparison.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    /// Comparisons that failed at the requested step but passed when
    /// re-measured at `epsilon / 16`; see [`GradCheck::check_params`].
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl GradCheck {
    /// Compares analytic parameter gradients of the scalar loss built by
    /// `f` against central differences through re-evaluation.
    ///
    /// The leaky rectifier makes the loss piecewise smooth; when a
    /// perturbation of +-epsilon pushes some pre-activation across zero,
    /// the secant mixes the slopes on both sides and says nothing about
    /// the gradient at the center.  A comparison that fails at the
    /// requested step is therefore re-measured at successively smaller
    /// steps (epsilon over 16, 64, 256): the crease falls outside the
    /// shrunken interval and the artifact disappears, while a wrong
    /// gradient formula keeps failing at every step size.  Re-measured
    /// elements are counted in `refined`.
    pub fn check_params<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Graph, &ParamStore) -> Result<Value>,
    {
        let graph = Graph::new();
        let loss = f(&graph, store)?;
        graph.backward(loss)?;
        let grads = graph.param_grads();

        let mut report = GradCheckReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
            tolerance: self.tolerance,
            refined: 0,
        };
        let mut perturbed = store.clone();
        for (name, grad) in &grads {
            if !store.is_trainable(name) {
                continue;
            }
            let len = grad.len();
            let picks: Vec<usize> = if self.max_per_param == 0 || len <= self.max_per_param {
                (0..len).collect()
            } else {
                (0..self.max_per_param)
                    .map(|i| i * len / self.max_per_param)
                    .collect()
            };
            for idx in picks {
                let mut err = self.measure(&f, &mut perturbed, name, idx, self.epsilon, grad[idx])?;
                for shrink in [16.0, 64.0, 256.0] {
                    if err <= self.tolerance {
                        break;
                    }
                    let fine = self.measure(
                        &f,
                        &mut perturbed,
                        name,
                        idx,
                        self.epsilon / shrink,
                        grad[idx],
                    )?;
                    if fine <= self.tolerance {
                        report.refined += 1;
                        err = fine;
                    }
                }
                report.checked += 1;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
        if report.checked == 0 {
            return Err(Error::InvalidArgument(
                "gradient check touched no trainable parameters".into(),
            ));
        }
        Ok(report)
    }

    fn measure<F>(
        &self,
        f: &F,
        perturbed: &mut ParamStore,
        name: &str,
        idx: usize,
        step: f64,
        analytic: f64,
    ) -> Result<f64>
    where
        F: Fn(&Graph, &ParamStore) -> Result<Value>,
    {
        let original = perturbed.get(name)?.data[idx];
        perturbed.get_mut(name)?.data[idx] = original + step;
        let plus = eval_loss(f, perturbed)?;
        perturbed.get_mut(name)?.data[idx] = original - step;
        let minus = eval_loss(f, perturbed)?;
        perturbed.get_mut(name)?.data[idx] = original;
        Ok(relative_error(analytic, (plus - minus) / (2.0 * step)))
    }
}

fn eval_loss<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&Graph, &ParamStore) -> Result<Value>,
{
    let graph = Graph::new();
    let loss = f(&graph, store)?;
    graph.scalar_value(loss)
}

/// Compares the analytic gradient of a scalar loss with respect to one
/// input leaf against central differences.  `f` receives the leaf and
/// must reduce it to a single element.  Returns the largest relative
/// error over all input elements.
pub fn check_input_grad<F>(shape: Vec<usize>, data: &[f64], epsilon: f64, f: F) -> Result<f64>
where
    F: Fn(&Graph, Value) -> Result<Value>,
{
    let graph = Graph::new();
    let x = graph.leaf(shape.clone(), data.to_vec())?;
    let loss = f(&graph, x)?;
    graph.backward(loss)?;
    let analytic = graph.grad(x);

    let mut worst = 0.0f64;
    let mut probe = data.to_vec();
    for idx in 0..data.len() {
        let original = probe[idx];
        probe[idx] = original + epsilon;
        let plus = {
            let g = Graph::new();
            let x = g.leaf(shape.clone(), probe.clone())?;
            g.scalar_value(f(&g, x)?)?
        };
        probe[idx] = original - epsilon;
        let minus = {
            let g = Graph::new();
            let x = g.leaf(shape.clone(), probe.clone())?;
            g.scalar_value(f(&g, x)?)?
        };
        probe[idx] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[idx], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_tiny_denominators() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quadratic_input_grad_checks_out() {
        let data = [0.3, -1.2, 2.5];
        let err = check_input_grad(vec![3], &data, 1e-4, |g, x| {
            g.reduce_sum(g.square(x), 0)
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
