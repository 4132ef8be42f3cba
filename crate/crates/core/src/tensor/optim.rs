//! Adam with bias correction.

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one flat parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One Adam update of `param` in place. `t` is the 1-based step number.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.is_empty() && state.v.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len(), state.m.len(), state.v.len()],
        });
    }
    let t = t.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            states: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let params = store.params_mut();
        self.states.resize_with(params.len(), AdamState::default);
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            let grad = p.grad.data().to_vec();
            adam_step(p.value.data_mut(), &grad, s, self.step, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3, -2.0];
        let mut s = AdamState::default();
        for t in 1..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, t, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![0.3, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![1.0];
        adam_step(&mut p, &[1.0], &mut AdamState::default(), 1, &cfg).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn quadratic_loss_decreases_after_warmup() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = vec![3.0];
        let mut s = AdamState::default();
        let mut prev = f64::INFINITY;
        let mut approaching = true;
        for t in 1..=1000 {
            let g = 2.0 * p[0];
            adam_step(&mut p, &[g], &mut s, t, &cfg).unwrap();
            let loss = p[0] * p[0];
            approaching &= p[0] > 0.05;
            if t > 10 && approaching {
                assert!(loss < prev, "step {t}: {loss} >= {prev}");
            }
            prev = loss;
        }
        assert!(p[0].abs() < 0.05);
    }

    #[test]
    fn store_step_is_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("w", Tensor::full(&[2], 1.0)).unwrap();
            store.grad_mut(id).data_mut().copy_from_slice(&[0.5, -0.25]);
            let mut opt = Adam::new(AdamConfig::default());
            opt.step(&mut store).unwrap();
            opt.step(&mut store).unwrap();
            store.value(id).clone()
        };
        assert_eq!(run(), run());
    }
}
