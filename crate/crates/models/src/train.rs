//! Pieces shared by the training loops.

use ppm_core::{Adam, Graph, ParamStore, Var};

use crate::error::{ModelError, Result};

/// Linear decay from `start` to `end` over `total` steps.
pub fn linear_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = (step as f64 / (total - 1) as f64).min(1.0);
    start + (end - start) * frac
}

/// Tracks the last finite loss so divergence can be reported.
#[derive(Debug)]
pub struct Trainer {
    pub adam: Adam,
    pub stage: &'static str,
    pub step: usize,
    pub last_finite: Option<f64>,
}

impl Trainer {
    pub fn new(stage: &'static str, lr: f64) -> Self {
        Trainer { adam: Adam::new(lr), stage, step: 0, last_finite: None }
    }

    /// Builds the loss with `build`, back-propagates and applies one Adam
    /// step. Returns the loss value.
    pub fn step<F>(&mut self, store: &mut ParamStore<f32>, lr: f64, build: F) -> Result<f64>
    where
        F: FnOnce(&mut Graph<f32>) -> Result<Var>,
    {
        let grads = {
            let mut g = Graph::new(store);
            let loss = build(&mut g)?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(ModelError::Diverged { stage: self.stage, step: self.step, last_finite: self.last_finite });
            }
            self.last_finite = Some(value);
            g.backward(loss)?
        };
        grads.apply_to(store)?;
        self.adam.lr = lr;
        self.adam.step(store)?;
        if !store.all_finite() {
            return Err(ModelError::Diverged { stage: self.stage, step: self.step, last_finite: self.last_finite });
        }
        self.step += 1;
        Ok(self.last_finite.unwrap_or(f64::NAN))
    }
}
