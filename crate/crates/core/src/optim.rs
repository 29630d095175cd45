//! Adam with bias correction and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter tensor {index}: {detail}")]
    ShapeMismatch { index: usize, detail: String },
    #[error("non-finite gradient in tensor {index} at entry {entry}")]
    NonFiniteGradient { index: usize, entry: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidHyperparameter(format!("{self:?}")))
        }
    }
}

/// Moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zeroed moments shaped like `sizes`.
    pub fn new(sizes: &[usize], config: &AdamConfig) -> Self {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            alpha: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    /// One bias-corrected update of every tensor. Nothing is modified when
    /// validation fails.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::ShapeMismatch {
                index: params.len().min(grads.len()),
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        for (index, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(OptimError::ShapeMismatch {
                    index,
                    detail: format!("param {} grad {} moment {}", p.len(), g.len(), m.len()),
                });
            }
            if let Some(entry) = g.iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient { index, entry });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.alpha * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 2, min_delta: 1e-4, min_lr: 1e-6 }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.factor > 0.0 && self.factor < 1.0 && self.patience >= 1 && self.min_delta >= 0.0 && self.min_lr >= 0.0 {
            Ok(())
        } else {
            Err(OptimError::InvalidHyperparameter(format!("{self:?}")))
        }
    }
}

/// Multiplies the learning rate by `factor` once validation accuracy has
/// failed to improve by more than `min_delta` for `patience` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    /// `None` until the first epoch is observed.
    pub best_seen: Option<f64>,
    pub wait: u32,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Self {
        PlateauScheduler { config, best_seen: None, wait: 0 }
    }

    pub fn update(&mut self, val_accuracy: f64, current_lr: f64) -> f64 {
        let improved = match self.best_seen {
            None => true,
            Some(best) => val_accuracy > best + self.config.min_delta,
        };
        if improved {
            self.best_seen = Some(val_accuracy);
            self.wait = 0;
            return current_lr;
        }
        self.wait += 1;
        if self.wait >= self.config.patience {
            self.wait = 0;
            return (current_lr * self.config.factor).max(self.config.min_lr).min(current_lr);
        }
        current_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_step(state: &mut AdamState, p: &mut f64, g: f64) {
        let mut ps = [*p];
        state.step(&mut [&mut ps[..]], &[&[g]]).unwrap();
        *p = ps[0];
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let mut state = AdamState::new(&[3], &AdamConfig::default());
        let mut p = vec![0.5, -1.0, 2.0];
        for _ in 0..10 {
            state.step(&mut [&mut p[..]], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(state.m[0], vec![0.0; 3]);
        assert_eq!(state.v[0], vec![0.0; 3]);
        assert_eq!(state.step, 10);
    }

    #[test]
    fn first_step_closed_form() {
        let mut state = AdamState::new(&[1], &AdamConfig::default());
        let mut p = 0.0;
        scalar_step(&mut state, &mut p, 1.0);
        assert!((p - (-0.001 / (1.0 + 1e-8))).abs() < 1e-12);
        assert!((p + 0.000999999990).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs_without_mutation() {
        let mut state = AdamState::new(&[2], &AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        assert!(matches!(state.step(&mut [&mut p[..]], &[&[1.0]]), Err(OptimError::ShapeMismatch { .. })));
        assert_eq!(
            state.step(&mut [&mut p[..]], &[&[1.0, f64::NAN]]),
            Err(OptimError::NonFiniteGradient { index: 0, entry: 1 })
        );
        assert_eq!(state.step, 0);
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = PlateauScheduler::new(PlateauConfig::default());
        let mut lr = 1e-3;
        let mut seq = vec![];
        for acc in [0.7, 0.7, 0.7] {
            lr = s.update(acc, lr);
            seq.push(lr);
        }
        assert_eq!(seq, vec![1e-3, 1e-3, 5e-4]);
    }

    #[test]
    fn improving_accuracy_keeps_rate() {
        let mut s = PlateauScheduler::new(PlateauConfig::default());
        let mut lr = 1e-3;
        for i in 0..10 {
            lr = s.update(0.5 + 0.04 * i as f64, lr);
        }
        assert_eq!(lr, 1e-3);
    }

    #[test]
    fn clamps_at_min_lr() {
        let mut s = PlateauScheduler::new(PlateauConfig { min_lr: 1e-5, ..PlateauConfig::default() });
        let mut lr = 1e-3;
        for _ in 0..100 {
            lr = s.update(0.3, lr);
            assert!(lr >= 1e-5);
        }
        assert_eq!(lr, 1e-5);
    }

    proptest! {
        #[test]
        fn step_one_magnitude_is_alpha(g in prop_oneof![1e-3f64..1e3, -1e3f64..-1e-3]) {
            let mut state = AdamState::new(&[1], &AdamConfig::default());
            let mut p = 0.0;
            scalar_step(&mut state, &mut p, g);
            prop_assert!(p.abs() <= 1e-3 && p.abs() >= 0.99e-3);
            prop_assert!(state.v[0][0] >= 0.0);
        }

        #[test]
        fn schedule_is_monotone(accs in proptest::collection::vec(0.0f64..1.0, 1..40), patience in 1u32..4) {
            let cfg = PlateauConfig { patience, ..PlateauConfig::default() };
            let mut s = PlateauScheduler::new(cfg);
            let mut lr = 1e-3;
            for a in accs {
                let next = s.update(a, lr);
                prop_assert!(next <= lr && next >= cfg.min_lr);
                lr = next;
            }
        }
    }
}
