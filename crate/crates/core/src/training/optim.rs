use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment slots, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One decoupled-weight-decay Adam update from the store's gradient
/// accumulators: `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
pub fn optimizer_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamWConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in store
        .values_and_grads_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let elems = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((pi, &gi), mi), vi) in elems {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *pi *= decay;
            *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![v, -2.0 * v])).unwrap();
        s
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut s = store(1.5);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        optimizer_step(&mut s, &mut st, 1e-2, &cfg);
        assert_eq!(s.get("p").unwrap().data(), &[1.5, -3.0]);
    }

    #[test]
    fn zero_grads_with_decay_shrink_params() {
        let mut s = store(1.5);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        optimizer_step(&mut s, &mut st, 1e-2, &cfg);
        let k = 1.0 - 1e-2 * 0.1;
        assert_eq!(s.get("p").unwrap().data(), &[1.5 * k, -3.0 * k]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(0.7)).unwrap();
        s.grads_mut()[id.0] = Tensor::scalar(1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let lr = 1e-3;
        optimizer_step(&mut s, &mut st, lr, &cfg);
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 0.7 - lr / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
    }
}
