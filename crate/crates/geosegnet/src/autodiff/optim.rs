//! Adam optimizer over named parameters.

use super::store::ParamStore;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Adam with bias correction.  First and second moments are kept per
/// parameter name, so one optimizer can follow a store across epochs.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter present in
    /// `grads`.  Gradients for unknown or non-trainable names are an
    /// error; parameters without a gradient entry are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            if !store.is_trainable(name) {
                return Err(Error::InvalidArgument(format!(
                    "gradient supplied for non-trainable parameter {name}"
                )));
            }
            let tensor = store.get_mut(name)?;
            if tensor.data.len() != grad.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam step",
                    lhs: tensor.shape.clone(),
                    rhs: vec![grad.len()],
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
