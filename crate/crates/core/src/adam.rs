//! Bias-corrected Adam over a list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    /// First moments, one vector per tensor.
    pub m: Vec<Vec<S>>,
    /// Second moments.
    pub v: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(sizes: &[usize], config: AdamConfig) -> Self {
        AdamState {
            config,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            step: 0,
        }
    }

    /// One update `p ← p − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]], lr: S) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam state has {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Dimension(format!("tensor {i} shape mismatch")));
            }
        }
        self.step += 1;
        let b1 = S::from_f64_lossy(self.config.beta1);
        let b2 = S::from_f64_lossy(self.config.beta2);
        let eps = S::from_f64_lossy(self.config.eps);
        let one = S::one();
        let t = self.step as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = AdamState::<f64>::new(&[2], AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        state.step(&mut [p.as_mut_slice()], &[&[3.0, -250.0]], 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        assert!((p[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (1.0 + 0.01 * 250.0 / (250.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut state = AdamState::<f64>::new(&[3], AdamConfig::default());
        let mut p = vec![0.5, -2.0, 7.0];
        let before = p.clone();
        state.step(&mut [p.as_mut_slice()], &[&[0.0; 3]], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // g = 2 twice, β1 = 0.9, β2 = 0.999:
        // m1 = 0.2, v1 = 0.004; m2 = 0.38, v2 = 0.007996
        // m̂2 = 0.38/0.19 = 2, v̂2 = 0.007996/0.001999 = 4
        let mut state = AdamState::<f64>::new(&[1], AdamConfig::default());
        let mut p = vec![0.0];
        state.step(&mut [p.as_mut_slice()], &[&[2.0]], 0.1).unwrap();
        assert!((state.m[0][0] - 0.2).abs() < 1e-15);
        assert!((state.v[0][0] - 0.004).abs() < 1e-15);
        state.step(&mut [p.as_mut_slice()], &[&[2.0]], 0.1).unwrap();
        assert!((state.m[0][0] - 0.38).abs() < 1e-15);
        assert!((state.v[0][0] - 0.007996).abs() < 1e-15);
        let m_hat = state.m[0][0] / (1.0 - 0.9f64.powi(2));
        let v_hat = state.v[0][0] / (1.0 - 0.999f64.powi(2));
        assert!((m_hat - 2.0).abs() < 1e-12 && (v_hat - 4.0).abs() < 1e-12);
        // each step moved by lr·2/(2 + ε)
        assert!((p[0] + 2.0 * 0.1 * 2.0 / (2.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut state = AdamState::<f32>::new(&[2], AdamConfig::default());
        let mut p = vec![0.0f32; 3];
        assert!(state.step(&mut [p.as_mut_slice()], &[&[0.0; 3]], 0.1).is_err());
    }
}
