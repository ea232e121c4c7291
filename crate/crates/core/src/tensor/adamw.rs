//! AdamW optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{ParamStore, TensorError};

/// Optimizer hyperparameters. The moment decay rates and epsilon default to
/// the conventional 0.9 / 0.999 / 1e-8.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    /// Zero-initialized moments matching the store's parameter shapes.
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled update over every parameter in the store:
    /// moment updates with bias correction, then
    /// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let tensor = store.get_mut(id);
            if self.m[i].len() != tensor.len() {
                return Err(TensorError::StateShape {
                    name: format!("param {i}"),
                    state: self.m[i].len(),
                    param: tensor.len(),
                });
            }
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("p", Tensor::row(values));
        store
    }

    fn set_grad(store: &mut ParamStore, g: &[f64]) {
        let id = store.ids().next().unwrap();
        store.get_mut(id).grad_mut().copy_from_slice(g);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With constant gradient g and weight decay 0, at t=1:
        // m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps).
        let mut store = store_with(vec![1.0, -2.0]);
        set_grad(&mut store, &[0.5, -0.25]);
        let cfg = AdamWConfig::new(0.01, 0.0);
        let mut state = AdamWState::new(cfg, &store);
        state.step(&mut store).unwrap();
        let p = store.by_name("p").unwrap();
        let expect = |theta: f64, g: f64| theta - 0.01 * g / (g.abs() + cfg.eps);
        assert!((p.data()[0] - expect(1.0, 0.5)).abs() < 1e-12);
        assert!((p.data()[1] - expect(-2.0, -0.25)).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = store_with(vec![3.0, -4.0]);
        set_grad(&mut store, &[0.0, 0.0]);
        let mut state = AdamWState::new(AdamWConfig::new(0.1, 0.0), &store);
        state.step(&mut store).unwrap();
        assert_eq!(store.by_name("p").unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn zero_grad_with_decay_is_pure_shrink() {
        let mut store = store_with(vec![3.0, -4.0]);
        set_grad(&mut store, &[0.0, 0.0]);
        let lr = 0.1;
        let wd = 0.5;
        let mut state = AdamWState::new(AdamWConfig::new(lr, wd), &store);
        state.step(&mut store).unwrap();
        let p = store.by_name("p").unwrap();
        assert!((p.data()[0] - 3.0 * (1.0 - lr * wd)).abs() < 1e-12);
        assert!((p.data()[1] + 4.0 * (1.0 - lr * wd)).abs() < 1e-12);
    }

    #[test]
    fn step_counter_increments() {
        let mut store = store_with(vec![1.0]);
        set_grad(&mut store, &[1.0]);
        let mut state = AdamWState::new(AdamWConfig::new(0.01, 0.0), &store);
        assert_eq!(state.step_count(), 0);
        state.step(&mut store).unwrap();
        state.step(&mut store).unwrap();
        assert_eq!(state.step_count(), 2);
    }
}
