//! Adam optimizer over visited parameter lists.
//!
//! Models expose their tensors through `visit_mut` in a fixed
//! declaration order; the optimizer keeps one moment pair per position,
//! so the pairing between state and parameter is positional and stable
//! across steps, serialization, and reruns.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters. `beta1` doubles as the configured momentum.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, momentum: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: momentum,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    /// `shapes` in the same order the model visits its tensors.
    pub fn new(cfg: AdamConfig, shapes: &[Vec<usize>]) -> Adam {
        Adam {
            cfg,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the step counter. Call once per optimizer step, before
    /// the per-tensor [`Self::update`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter in place. `idx` is its position in the
    /// model's visit order; the current step must have been opened with
    /// [`Self::begin_step`].
    pub fn update(&mut self, idx: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if self.step == 0 {
            return Err(Error::invalid("adam_update", "begin_step not called"));
        }
        let (m, v) = match (self.m.get_mut(idx), self.v.get_mut(idx)) {
            (Some(m), Some(v)) => (m, v),
            _ => {
                return Err(Error::invalid(
                    "adam_update",
                    format!("parameter index {idx} beyond {} state slots", self.m.len()),
                ))
            }
        };
        if param.shape() != grad.shape() || param.shape() != m.shape() {
            return Err(Error::shapes("adam_update", param.shape(), grad.shape()));
        }
        let t = self.step as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        for (((w, g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * g;
            *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
        }
        Ok(())
    }

    /// Apply one update over aligned slices. `params` and `grads` must
    /// line up with the shapes given at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "{} parameters and {} gradients for {} state slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.begin_step();
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, param, grad)?;
        }
        Ok(())
    }
}
