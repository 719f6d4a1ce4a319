use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{CheckpointTensor, ParamStore};
use crate::error::{Error, Result};
use crate::Scalar;

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total`. Steps past
/// `total` stay at `lr_min`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    let lr = lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos());
    lr.clamp(lr_min.min(lr0), lr0.max(lr_min))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, lr_min: 1e-6, total_steps: 1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with decoupled weight decay and a per-step cosine schedule.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Rate the next call to [`AdamW::step`] will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.config.total_steps, self.config.lr, self.config.lr_min)
    }

    /// Applies one update to every trainable parameter and consumes its
    /// gradient. A trainable parameter without a gradient is a contract error,
    /// raised before any parameter is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<f64> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let t = store.get(id);
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::Contract(format!("parameter {} has no gradient", store.name(id))));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr_t, eps, decay) = (T::lit(lr), T::lit(c.eps), T::lit(1.0 - lr * c.weight_decay));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for id in ids {
            let i = id.index();
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let g = t.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }

    /// Moment buffers as checkpoint tensors named `opt.m/<param>` and
    /// `opt.v/<param>`, plus the step counter.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<CheckpointTensor> {
        let mut out = vec![CheckpointTensor { name: "opt.step".into(), shape: vec![1], data: vec![self.step as f64] }];
        for (id, name, t) in store.iter() {
            for (prefix, buf) in [("opt.m/", &self.m[id.index()]), ("opt.v/", &self.v[id.index()])] {
                out.push(CheckpointTensor {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    data: buf.iter().map(|x| x.as_f64()).collect(),
                });
            }
        }
        out
    }

    /// Restores state written by [`AdamW::export`]; absent entries stay zero.
    pub fn import(&mut self, store: &ParamStore<T>, tensors: &[CheckpointTensor]) -> Result<()> {
        for ct in tensors {
            if ct.name == "opt.step" {
                self.step = ct.data.first().copied().unwrap_or(0.0) as u64;
                continue;
            }
            let (buf, name) = if let Some(n) = ct.name.strip_prefix("opt.m/") {
                (&mut self.m, n)
            } else if let Some(n) = ct.name.strip_prefix("opt.v/") {
                (&mut self.v, n)
            } else {
                continue;
            };
            let id = store.id(name).ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter {name}")))?;
            if store.get(id).shape() != ct.shape.as_slice() {
                return Err(Error::Format(format!("optimizer state shape mismatch for {name}")));
            }
            buf[id.index()] = ct.data.iter().map(|&x| T::lit(x)).collect();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Init;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1.0, 0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let mut prev = f64::INFINITY;
        for s in 0..=250 {
            let lr = cosine_lr(s, 200, 3e-4, 1e-6);
            assert!(lr <= prev && (1e-6..=3e-4).contains(&lr));
            prev = lr;
        }
    }

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.add("w", &[1], Init::Zeros, &mut rng);
        store.get_mut(id).data_mut()[0] = value;
        store
    }

    #[test]
    fn hand_computed_first_step() {
        // loss = w^2 at w = 1: g = 2, m = 0.2, v = 0.004, bias-corrected
        // m/sqrt(v) = 2/2 = 1, so w moves by exactly lr (minus eps effects).
        let mut store = one_param(1.0);
        let id = store.id("w").unwrap();
        let cfg = AdamWConfig { lr: 0.1, lr_min: 0.1, total_steps: 10, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        store.get_mut(id).grad = Some(vec![2.0]);
        opt.step(&mut store).unwrap();
        let w = store.get(id).data()[0];
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15, "{w}");
        assert!((opt.m[0][0] - 0.2).abs() < 1e-15);
        assert!((opt.v[0][0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let mut store = one_param(2.0);
        let id = store.id("w").unwrap();
        let cfg = AdamWConfig { lr: 0.1, lr_min: 0.1, total_steps: 10, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        store.get_mut(id).grad = Some(vec![0.0]);
        opt.step(&mut store).unwrap();
        assert!((store.get(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(opt.m[0][0], 0.0);
        assert_eq!(opt.v[0][0], 0.0);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut store = one_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        assert!(matches!(opt.step(&mut store), Err(Error::Contract(_))));
        assert_eq!(store.get(store.id("w").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn zero_rate_freezes_weights() {
        let mut store = one_param(0.7);
        let id = store.id("w").unwrap();
        let cfg = AdamWConfig { lr: 0.0, lr_min: 0.0, total_steps: 5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..5 {
            store.get_mut(id).grad = Some(vec![1.3]);
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.get(id).data()[0], 0.7);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = one_param(1.0);
        store.set_trainable("w", false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn export_import_round_trip() {
        let mut store = one_param(1.0);
        let id = store.id("w").unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        store.get_mut(id).grad = Some(vec![0.5]);
        opt.step(&mut store).unwrap();
        let saved = opt.export(&store);
        let mut fresh = AdamW::new(AdamWConfig::default(), &store);
        fresh.import(&store, &saved).unwrap();
        assert_eq!(fresh.steps_taken(), 1);
        assert_eq!(fresh.m, opt.m);
        assert_eq!(fresh.v, opt.v);
    }
}
