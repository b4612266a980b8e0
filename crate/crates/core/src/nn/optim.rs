//! AdamW with decoupled weight decay and a triangular cyclic learning rate.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

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
            weight_decay: 1e-2,
        }
    }
}

/// Moment accumulators, one pair per parameter in store order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            second: zeros.clone(),
            first: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update using the gradients currently accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        assert_eq!(self.first.len(), store.len(), "optimizer/store mismatch");
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for ((param, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grads = param.grad.data();
            let values = param.value.data_mut();
            for (((w, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w *= decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Triangle wave between `lr_min` and `lr_max`, starting at `lr_min`.
///
/// With `decay = Some(gamma)` the amplitude is multiplied by `gamma` after each
/// full cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub lr_min: f64,
    pub lr_max: f64,
    pub half_period: u64,
    pub decay: Option<f64>,
}

impl CyclicLr {
    pub fn new(lr_min: f64, lr_max: f64, half_period: u64) -> Self {
        assert!(lr_min <= lr_max, "lr_min must not exceed lr_max");
        assert!(half_period >= 1, "half period must be at least one step");
        Self {
            lr_min,
            lr_max,
            half_period,
            decay: None,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        triangular_cyclic_lr(step, self.lr_min, self.lr_max, self.half_period, self.decay)
    }
}

pub fn triangular_cyclic_lr(
    step: u64,
    lr_min: f64,
    lr_max: f64,
    half_period: u64,
    decay: Option<f64>,
) -> f64 {
    let period = 2 * half_period;
    let cycle = step / period;
    let pos = (step % period) as f64 / half_period as f64;
    let frac = 1.0 - (pos - 1.0).abs();
    let amplitude = match decay {
        Some(gamma) => (lr_max - lr_min) * gamma.powi(cycle as i32),
        None => lr_max - lr_min,
    };
    lr_min + amplitude * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut store = scalar_store(1.5);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, 1e-3);
        assert_eq!(store.iter().next().unwrap().1.value.item(), 1.5);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut store = scalar_store(2.0);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        opt.step(&mut store, 0.01);
        let w = store.iter().next().unwrap().1.value.item();
        assert!((w - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn triangle_endpoints() {
        let lr = CyclicLr::new(1e-4, 5e-4, 10);
        assert_eq!(lr.at(0), 1e-4);
        assert!((lr.at(10) - 5e-4).abs() < 1e-18);
        assert!((lr.at(20) - 1e-4).abs() < 1e-18);
        assert!((lr.at(5) - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn decayed_amplitude_halves_per_cycle() {
        let lr = CyclicLr {
            decay: Some(0.5),
            ..CyclicLr::new(0.0, 1.0, 4)
        };
        assert!((lr.at(4) - 1.0).abs() < 1e-12);
        assert!((lr.at(12) - 0.5).abs() < 1e-12);
    }
}
