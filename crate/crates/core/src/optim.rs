use indexmap::IndexMap;

use crate::error::{Result, StamError};
use crate::params::ParamStore;

/// Adam with bias correction. Moment buffers are created on the first step
/// for each parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One in-place Adam update of every parameter. Gradients are left as they
/// are; the caller zeroes them before the next accumulation.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(StamError::MissingGradient(name.to_string()));
        }
        if let Some(m) = state.first.get(name) {
            if m.len() != t.numel() {
                return Err(StamError::shape("adam_step", t.shape(), &[m.len()]));
            }
        }
    }

    state.step_count += 1;
    let t_step = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t_step);
    let bias2 = 1.0 - b2.powi(t_step);

    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        for (((theta, g), m), v) in tensor
            .values_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
