//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, AdamState>,
    scales: Vec<(String, f64)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            state: BTreeMap::new(),
            scales: Vec::new(),
        }
    }

    /// Multiplies the learning rate of every parameter named `prefix*` by
    /// `scale`. A later call with the same prefix replaces the earlier one;
    /// with overlapping prefixes the longest wins.
    pub fn set_lr_scale(&mut self, prefix: &str, scale: f64) {
        self.scales.retain(|(p, _)| p != prefix);
        self.scales.push((prefix.to_string(), scale));
        self.scales.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    }

    pub fn lr_scale(&self, name: &str) -> f64 {
        self.scales.iter().find(|(p, _)| name.starts_with(p.as_str())).map_or(1.0, |s| s.1)
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.state.get(name)
    }

    /// Applies one update to every trainable parameter from its `grad`.
    /// Frozen parameters are skipped entirely; a trainable parameter without
    /// a gradient is an error and nothing is updated.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(CoreError::MissingGradient(p.name.clone()));
        }
        for p in store.iter_mut().filter(|p| p.trainable) {
            let lr = self.lr * self.lr_scale(&p.name);
            let grad: &Tensor<T> = p.grad.as_ref().expect("checked above");
            let n = p.value.numel();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let values = p.value.data_mut();
            for i in 0..n {
                let g = grad.data()[i].as_f64();
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + self.eps);
                values[i] = T::of(values[i].as_f64() - upd);
            }
        }
        Ok(())
    }
}
