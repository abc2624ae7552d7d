use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<F: Real>(
    param: &mut [F],
    grad: &[F],
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() || param.len() != state.v.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len(), state.m.len()],
        });
    }
    state.t += 1;
    let b1 = F::of(cfg.beta1);
    let b2 = F::of(cfg.beta2);
    let bc1 = F::of(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = F::of(1.0 - cfg.beta2.powi(state.t as i32));
    let lr = F::of(cfg.lr);
    let eps = F::of(cfg.eps);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a fixed group of parameters in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    ids: Vec<ParamId>,
    states: Vec<AdamState<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, ids: Vec<ParamId>, cfg: AdamConfig) -> Self {
        let states = ids.iter().map(|&id| AdamState::new(store.get(id).len())).collect();
        Adam { cfg, ids, states }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn states(&self) -> &[AdamState<F>] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [AdamState<F>] {
        &mut self.states
    }

    /// Applies accumulated gradients, then clears them. Parameters without
    /// a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        for (&id, state) in self.ids.iter().zip(self.states.iter_mut()) {
            let tensor = store.get_mut(id);
            if let Some(grad) = tensor.grad.take() {
                adam_step(tensor.data_mut(), &grad, state, &self.cfg)?;
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`<prefix>.<param>.m` / `.v` / `.t`) for checkpointing.
    pub fn export(&self, store: &ParamStore<F>, prefix: &str) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        for (&id, s) in self.ids.iter().zip(&self.states) {
            let name = store.name(id);
            out.push((format!("{prefix}.{name}.m"), Tensor::from_vec(s.m.clone())));
            out.push((format!("{prefix}.{name}.v"), Tensor::from_vec(s.v.clone())));
            out.push((
                format!("{prefix}.{name}.t"),
                Tensor::scalar(F::of(s.t as f64)),
            ));
        }
        out
    }

    pub fn import(
        &mut self,
        store: &ParamStore<F>,
        prefix: &str,
        mut lookup: impl FnMut(&str) -> Result<Tensor<F>>,
    ) -> Result<()> {
        for (&id, s) in self.ids.iter().zip(self.states.iter_mut()) {
            let name = store.name(id);
            let m = lookup(&format!("{prefix}.{name}.m"))?;
            let v = lookup(&format!("{prefix}.{name}.v"))?;
            let t = lookup(&format!("{prefix}.{name}.t"))?;
            if m.len() != s.m.len() || v.len() != s.v.len() {
                return Err(AutodiffError::Checkpoint(format!(
                    "optimizer state for {name} has wrong length"
                )));
            }
            s.m = m.into_data();
            s.v = v.into_data();
            s.t = t.item().as_f64() as u64;
        }
        Ok(())
    }
}
