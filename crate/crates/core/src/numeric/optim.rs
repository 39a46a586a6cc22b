use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay.
///
/// The decay is applied to the parameter before the moment update, matching
/// the common `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)` formulation.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(&id)
    }

    /// Updates every trainable parameter from its gradient, then zeroes the
    /// gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids = store.trainable();
        if let Some(&missing) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(TensorError::Contract(format!(
                "parameter {} has no gradient",
                store.get(missing).name
            )));
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.as_ref().expect("checked above");
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let vals = p.value.data_mut();
            for (((x, g), m), v) in vals
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *x *= 1.0 - c.lr * c.weight_decay;
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tape;

    #[test]
    fn zero_grad_zero_decay_leaves_param() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.7, -1.3]), true);
        store.zero_grads();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[0.7, -1.3]);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0]), true);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut store), Err(TensorError::Contract(_))));
    }

    /// Reference written from scratch for a single scalar.
    fn reference_adamw(x0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            x -= lr * wd * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        x
    }

    #[test]
    fn scalar_step_matches_reference() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.5]), true);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = [0.3, -0.2, 0.9];
        for &g in &grads {
            store.zero_grads();
            store.accumulate_grad(id, &[g]);
            opt.step(&mut store).unwrap();
        }
        let expected = reference_adamw(1.5, &grads, 1e-3, 0.01);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.steps(), 3);
        // first step, no decay: exactly lr·sign(g)
        let mut s2 = ParamStore::new();
        let id2 = s2.add("w", Tensor::vector(vec![0.0]), true);
        s2.zero_grads();
        s2.accumulate_grad(id2, &[4.0]);
        AdamW::new(AdamWConfig::default()).step(&mut s2).unwrap();
        assert!((s2.value(id2).data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn quadratic_loss_decreases() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![2.0]), true);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.02, ..Default::default() });
        let loss_at = |store: &ParamStore| (store.value(id).data()[0] - 0.5).powi(2);
        let start = loss_at(&store);
        store.zero_grads();
        let mut prev = start;
        for _ in 0..50 {
            let mut t = Tape::new();
            let x = t.param(&store, id);
            let d = t.add_const(x, -0.5);
            let sq = t.mul(d, d).unwrap();
            let l = t.sum(sq);
            t.backward_into(l, &mut store).unwrap();
            opt.step(&mut store).unwrap();
            let now = loss_at(&store);
            assert!(now <= prev + 1e-12);
            prev = now;
        }
        assert!(prev < 0.5 * start);
        let (m, v) = opt.moments(id).unwrap();
        assert_eq!(m.shape(), store.value(id).shape());
        assert_eq!(v.shape(), store.value(id).shape());
    }
}
