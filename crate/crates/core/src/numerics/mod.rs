//! Differentiable dense-tensor substrate: tensors, a reverse-mode tape, the
//! parameter store with Adam, seeded random streams and the checkpoint codec.

pub mod checkpoint;
pub mod rng;
mod tape;
mod tensor;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::math;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape mismatch in {op}: operands {shapes:?}")]
pub struct ShapeError {
    pub op: &'static str,
    pub shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("non-finite gradient at step {step} in parameter `{param}`")]
    NonFiniteGradient { step: u64, param: String },
    #[error("gradient for `{param}` has {got} values, parameter has {want}")]
    GradientShape { param: String, got: usize, want: usize },
    #[error("expected {want} gradients, got {got}")]
    GradientCount { want: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters plus Adam moments and step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its id.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let n = value.len();
        self.slots.push(Slot { name: name.into(), value, m: vec![0.0; n], v: vec![0.0; n] });
        self.slots.len() - 1
    }

    /// Uniform Glorot initialization for a `[fan_in, fan_out]` weight.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> usize {
        let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let vals = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, Tensor::new(&[fan_in, fan_out], vals))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn name(&self, id: usize) -> &str {
        &self.slots[id].name
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.slots[id].value
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.slots[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// One Adam update with bias correction. Fails without modifying the
    /// store if any gradient is non-finite or mis-shaped.
    pub fn adam_step(&mut self, grads: &[Vec<f64>], cfg: &AdamConfig) -> Result<(), NumericsError> {
        if grads.len() != self.slots.len() {
            return Err(NumericsError::GradientCount { want: self.slots.len(), got: grads.len() });
        }
        let step = self.step + 1;
        for (slot, g) in self.slots.iter().zip(grads) {
            if g.len() != slot.value.len() {
                return Err(NumericsError::GradientShape { param: slot.name.clone(), got: g.len(), want: slot.value.len() });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFiniteGradient { step, param: slot.name.clone() });
            }
        }
        let bc1 = 1.0 - libm::pow(cfg.beta1, step as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, step as f64);
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            let vals = slot.value.values_mut();
            for i in 0..g.len() {
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                vals[i] -= cfg.lr * mhat / (math::sqrt(vhat) + cfg.eps);
            }
        }
        self.step = step;
        Ok(())
    }

    /// Copies parameter values from `other` where names and shapes agree.
    /// Returns how many parameters were copied.
    pub fn load_values(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for slot in self.slots.iter_mut() {
            if let Some(src) = other.slots.iter().find(|s| s.name == slot.name) {
                if src.value.shape() == slot.value.shape() {
                    slot.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[2], vec![1.0, -2.0]));
        s.adam_step(&[vec![0.0, 0.0]], &AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        assert_eq!(s.tensor(0).values(), &[1.0, -2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(0.5));
        s.adam_step(&[vec![1.0]], &AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let want = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((s.tensor(0).values()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(0.3));
        s.add("b", Tensor::scalar(0.3));
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        for k in 0..50 {
            let g = (k as f64 * 0.37).sin();
            s.adam_step(&[vec![g], vec![g]], &cfg).unwrap();
        }
        assert_eq!(s.tensor(0).values(), s.tensor(1).values());
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut s = ParamStore::new();
        s.add("ok", Tensor::scalar(0.0));
        s.add("bad", Tensor::scalar(0.0));
        let before = s.clone();
        let err = s.adam_step(&[vec![1.0], vec![f64::NAN]], &AdamConfig::default()).unwrap_err();
        assert_eq!(err, NumericsError::NonFiniteGradient { step: 1, param: "bad".into() });
        assert_eq!(s, before);
    }
}
