use ndarray::Array4;

use crate::error::{Error, Result};
use crate::nn::param::ParamStore;
use crate::nn::scalar::Scalar;

/// Adam hyperparameters. The learning-rate default matches the training
/// protocol used throughout the harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter, aligned
/// with the store's insertion order.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Array4<F>>,
    pub v: Vec<Array4<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let m = store.iter().map(|p| Array4::zeros(p.value.raw_dim())).collect();
        let v = store.iter().map(|p| Array4::zeros(p.value.raw_dim())).collect();
        AdamState { config, t: 0, m, v }
    }

    /// One Adam step with bias correction. Parameters flagged non-trainable
    /// are untouched. A NaN gradient aborts, naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for i in 0..store.len() {
            let p = store.by_index(i);
            if p.trainable && p.grad.iter().any(|g| g.is_nan()) {
                return Err(Error::NanGradient(p.name.clone()));
            }
        }
        self.t += 1;
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let lr = F::from_f64(self.config.lr);
        let eps = F::from_f64(self.config.epsilon);
        let one = F::one();
        let bias1 = one - b1.powi(self.t as i32);
        let bias2 = one - b2.powi(self.t as i32);
        for i in 0..store.len() {
            let p = store.by_index_mut(i);
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&p.grad).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&p.grad).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
