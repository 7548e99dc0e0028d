use serde::{Deserialize, Serialize};

use crate::error::{LirfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    hyper: AdamConfig,
}

impl OptimState {
    pub fn new(n_params: usize, hyper: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn hyper(&self) -> &AdamConfig {
        &self.hyper
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(weights: &mut [f64], grad: &[f64], state: &mut OptimState) -> Result<()> {
    if weights.len() != grad.len() || weights.len() != state.first_moment.len() {
        return Err(LirfError::DimensionMismatch {
            expected: weights.len(),
            got: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(LirfError::NonFinite(format!("gradient component {i}")));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.hyper;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((w, &g), m), v) in weights
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = vec![1.0, -2.0, 3.5];
        let mut s = OptimState::new(3, AdamConfig::default());
        adam_step(&mut w, &[0.0; 3], &mut s).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = vec![0.0];
        let mut s = OptimState::new(1, AdamConfig::with_learning_rate(0.1));
        adam_step(&mut w, &[1.0], &mut s).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε).
        assert!((w[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn scalar_descent_converges() {
        let mut w = vec![0.0];
        let mut s = OptimState::new(1, AdamConfig::with_learning_rate(0.3));
        let mut errs = Vec::new();
        for _ in 0..10 {
            let g = 2.0 * (w[0] - 3.0);
            adam_step(&mut w, &[g], &mut s).unwrap();
            errs.push((w[0] - 3.0f64).abs());
        }
        for pair in errs[5..].windows(2) {
            assert!(pair[1] < pair[0], "{errs:?}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut w = vec![0.0; 2];
        let mut s = OptimState::new(2, AdamConfig::default());
        assert!(adam_step(&mut w, &[f64::NAN, 0.0], &mut s).is_err());
        assert!(adam_step(&mut w, &[0.0], &mut s).is_err());
    }

    #[test]
    fn uniform_gradient_scaling_keeps_direction() {
        let hyper = AdamConfig {
            epsilon: 1e-12,
            ..AdamConfig::default()
        };
        let g = [0.3, -1.7, 2.2, 1e-3];
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let (mut a, mut b) = (vec![0.0; 4], vec![0.0; 4]);
        adam_step(&mut a, &g, &mut OptimState::new(4, hyper)).unwrap();
        adam_step(&mut b, &g2, &mut OptimState::new(4, hyper)).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let angle = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-6);
    }
}
