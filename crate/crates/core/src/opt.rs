//! Adam with decoupled weight decay and bias correction.
//!
//! One implementation drives both the perturbation updates of the attack loop
//! and the toy training loop.

use serde::{Deserialize, Serialize};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Hyperparameters. Weight decay is decoupled (applied to the values, not the
/// gradient) and defaults to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected update of `values` in place.
    pub fn step(&mut self, values: &mut [f64], grad: &[f64], lr: f64, hp: &AdamParams) {
        assert_eq!(values.len(), grad.len(), "gradient length mismatch");
        assert_eq!(values.len(), self.m.len(), "state length mismatch");
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for i in 0..values.len() {
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * grad[i];
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= lr * (m_hat / (v_hat.sqrt() + hp.epsilon) + hp.weight_decay * values[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_with_unit_gradient() {
        // With bias correction, the very first step moves by ≈ lr.
        let mut state = AdamState::new(1);
        let mut z = vec![0.0];
        state.step(&mut z, &[1.0], 0.01, &AdamParams::default());
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((z[0] - expected).abs() < 1e-12, "{} vs {expected}", z[0]);
    }

    #[test]
    fn zero_gradient_with_zero_moments_is_fixed_point() {
        let mut state = AdamState::new(3);
        let mut z = vec![0.1, -0.2, 0.3];
        let before = z.clone();
        state.step(&mut z, &[0.0, 0.0, 0.0], 0.01, &AdamParams::default());
        assert_eq!(z, before);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut state = AdamState::new(2);
            let mut z = vec![0.0, 0.0];
            for i in 0..10 {
                let g = [0.5 + i as f64 * 0.1, -1.0];
                state.step(&mut z, &g, 0.01, &AdamParams::default());
            }
            z
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn decoupled_weight_decay_shrinks_values() {
        let hp = AdamParams {
            weight_decay: 0.1,
            ..AdamParams::default()
        };
        let mut state = AdamState::new(1);
        let mut z = vec![1.0];
        state.step(&mut z, &[0.0], 0.01, &hp);
        assert!((z[0] - (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }
}
