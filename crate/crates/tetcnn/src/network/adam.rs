//! Adam with decoupled weight decay.

use super::{Gradients, Model, NetworkError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay applied to conv and FC weights only (not biases, not
    /// BN parameters).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4 }
    }
}

/// First/second moment buffers per parameter tensor plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let sizes: Vec<usize> = model.param_tensor_sizes();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }
}

/// One optimizer step over every parameter tensor, in canonical order.
pub fn adam_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), NetworkError> {
    if !grads.is_finite() {
        return Err(NetworkError::NonFinite { context: "gradient" });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let grad_slices = grads.param_slices();
    let decay_flags = model.param_decay_flags();
    let param_slices = model.param_slices_mut();
    debug_assert_eq!(grad_slices.len(), param_slices.len());
    for (idx, (params, grad)) in param_slices.into_iter().zip(grad_slices).enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let wd = if decay_flags[idx] { config.weight_decay } else { 0.0 };
        for j in 0..params.len() {
            let g = grad[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            params[j] -= config.lr * (m_hat / (v_hat.sqrt() + config.epsilon) + wd * params[j]);
        }
    }
    Ok(())
}

impl Model {
    /// Canonical parameter tensor order: per block theta, gamma, beta; then
    /// fc1 weight/bias, fc2 weight/bias. Every traversal below must match.
    pub(crate) fn param_tensor_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for b in &self.blocks {
            sizes.push(b.conv.theta.len());
            sizes.push(b.bn.gamma.len());
            sizes.push(b.bn.beta.len());
        }
        sizes.push(self.fc1.weight.len());
        sizes.push(self.fc1.bias.len());
        sizes.push(self.fc2.weight.len());
        sizes.push(self.fc2.bias.len());
        sizes
    }

    pub(crate) fn param_decay_flags(&self) -> Vec<bool> {
        let mut flags = Vec::new();
        for _ in &self.blocks {
            flags.extend([true, false, false]);
        }
        flags.extend([true, false, true, false]);
        flags
    }

    /// Names aligned with the canonical tensor order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, _) in self.blocks.iter().enumerate() {
            names.push(format!("conv{}.theta", i + 1));
            names.push(format!("bn{}.gamma", i + 1));
            names.push(format!("bn{}.beta", i + 1));
        }
        names.push("fc1.weight".into());
        names.push("fc1.bias".into());
        names.push("fc2.weight".into());
        names.push("fc2.bias".into());
        names
    }

    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut slices: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            slices.push(b.conv.theta.as_slice_mut().unwrap());
            slices.push(b.bn.gamma.as_slice_mut().unwrap());
            slices.push(b.bn.beta.as_slice_mut().unwrap());
        }
        slices.push(self.fc1.weight.as_slice_mut().unwrap());
        slices.push(self.fc1.bias.as_slice_mut().unwrap());
        slices.push(self.fc2.weight.as_slice_mut().unwrap());
        slices.push(self.fc2.bias.as_slice_mut().unwrap());
        slices
    }

}

impl Gradients {
    pub(crate) fn param_slices(&self) -> Vec<&[f64]> {
        let mut slices: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            slices.push(b.theta.as_slice().unwrap());
            slices.push(b.gamma.as_slice().unwrap());
            slices.push(b.beta.as_slice().unwrap());
        }
        slices.push(self.fc1_weight.as_slice().unwrap());
        slices.push(self.fc1_bias.as_slice().unwrap());
        slices.push(self.fc2_weight.as_slice().unwrap());
        slices.push(self.fc2_bias.as_slice().unwrap());
        slices
    }
}
