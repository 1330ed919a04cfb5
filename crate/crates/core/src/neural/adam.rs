//! Adaptive-moment gradient step with bias correction.

use super::{MlpGradients, MlpParameters};
use crate::error::{Error, Result};

/// Optimizer state: first and second moment estimates per parameter, kept
/// across epochs, plus the step counter driving bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParameters) -> Self {
        let n = params.param_count();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer update. Moments persist in `state`; the parameter version
/// counter is bumped so rollouts can assert they all saw the same weights.
pub fn adam_step(
    params: &mut MlpParameters,
    grads: &MlpGradients,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    let flat = grads.flat();
    if flat.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: state.m.len(),
            got: flat.len(),
            context: "optimizer state",
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (i, g) in flat.iter().enumerate() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let update = learning_rate * m_hat / (v_hat.sqrt() + state.eps);
        params.set_flat(i, params.get_flat(i) - update);
    }
    params.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> MlpParameters {
        MlpParameters::new_random(&[2, 2, 1], 4).unwrap()
    }

    fn grad_of(params: &MlpParameters, values: &[f64]) -> MlpGradients {
        let mut g = MlpGradients::zeros_like(params);
        let mut k = 0;
        for w in g.weights.iter_mut().chain(g.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = values[k % values.len()];
                k += 1;
            }
        }
        g
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let g = MlpGradients::zeros_like(&p);
        adam_step(&mut p, &g, &mut state, 0.05).unwrap();
        for i in 0..p.param_count() {
            assert_eq!(p.get_flat(i), before.get_flat(i));
        }
        assert_eq!(p.version(), before.version() + 1);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn first_step_magnitude_is_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps),
        // i.e. a signed step of roughly lr per parameter.
        let mut p = tiny_params();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let g = grad_of(&p, &[0.3, -2.0, 7.5]);
        adam_step(&mut p, &g, &mut state, 0.05).unwrap();
        let flat_g = g.flat();
        for i in 0..p.param_count() {
            let delta = p.get_flat(i) - before.get_flat(i);
            assert!(
                (delta.abs() - 0.05).abs() < 1e-6,
                "step magnitude {delta} off at {i}"
            );
            assert_eq!(delta.signum(), -flat_g[i].signum());
        }
    }

    #[test]
    fn repeated_identical_gradients_drift_monotonically() {
        let mut p = tiny_params();
        let mut state = AdamState::new(&p);
        let g = grad_of(&p, &[1.0]);
        let start = p.get_flat(0);
        let mut last = start;
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut state, 0.05).unwrap();
            let now = p.get_flat(0);
            assert!(
                now < last,
                "positive gradient must keep decreasing the parameter"
            );
            last = now;
        }
        assert_eq!(state.step_count(), 10);
    }

    #[test]
    fn state_dimension_mismatch_rejected() {
        let mut p = tiny_params();
        let other = MlpParameters::new_random(&[2, 5, 1], 4).unwrap();
        let mut state = AdamState::new(&other);
        let g = MlpGradients::zeros_like(&p);
        assert!(adam_step(&mut p, &g, &mut state, 0.05).is_err());
    }
}
