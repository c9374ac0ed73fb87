//! AdamW with decoupled weight decay, and the warmup-cosine schedule.

use std::collections::BTreeMap;

use dmlf_tensor::Tensor;

use crate::config::TrainConfig;
use crate::error::{config_err, DmlfError, Result};
use crate::params::ParamStore;

/// Moments and step count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            slots: BTreeMap::new(),
        }
    }

    /// One update at learning rate `lr`.
    ///
    /// Frozen parameters and parameters without a gradient are left alone.
    /// Decay (`p -= lr * wd * p`) is applied before the moment step and only
    /// to tensors flagged for decay. Any non-finite gradient aborts the whole
    /// step before anything is written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f32) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(DmlfError::Numeric(format!(
                    "non-finite gradient for '{name}' at element {i}: {}",
                    g.data()[i]
                )));
            }
        }
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (name, param) in store.iter_mut() {
            if param.frozen {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != param.value.shape() {
                return Err(DmlfError::Numeric(format!(
                    "gradient for '{name}' has shape {:?}, parameter {:?}",
                    g.shape(),
                    param.value.shape()
                )));
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                step: 0,
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            slot.step += 1;
            let bc1 = 1.0 - b1.powi(slot.step as i32);
            let bc2 = 1.0 - b2.powi(slot.step as i32);
            let decay = if param.decay { lr * wd } else { 0.0 };
            let p = param.value.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                if decay != 0.0 {
                    p[i] -= decay * p[i];
                }
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup `0 -> lr_max` over `warmup` steps, then cosine to `lr_min`
/// at `total`. Steps past `total` stay at `lr_min`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, lr_max: f32, lr_min: f32) -> Result<f32> {
    if total <= warmup {
        return config_err(format!("total steps {total} must exceed warmup steps {warmup}"));
    }
    if step <= warmup {
        return Ok(if warmup == 0 {
            lr_max
        } else {
            lr_max * step as f32 / warmup as f32
        });
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok((f64::from(lr_min) + f64::from(lr_max - lr_min) * cos) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let lr = |s| lr_schedule(s, 10, 110, 1e-3, 1e-5).unwrap();
        assert_eq!(lr(0), 0.0);
        assert!((lr(5) - 5e-4).abs() < 1e-9);
        assert_eq!(lr(10), 1e-3);
        assert!((lr(60) - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-8);
        assert!((lr(110) - 1e-5).abs() < 1e-9);
        assert!((lr(500) - 1e-5).abs() < 1e-9);
        for s in 10..110 {
            assert!(lr(s + 1) <= lr(s));
        }
        assert!(lr_schedule(0, 10, 10, 1e-3, 0.0).is_err());
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, -2.0]), false, true);
        s.insert("b", Tensor::vector(vec![0.5]), false, false);
        s.insert("frozen", Tensor::vector(vec![3.0]), true, true);
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut s = store();
        let mut opt = AdamW::new(&cfg);
        let grads = BTreeMap::from([
            ("w".to_string(), Tensor::vector(vec![0.3, -4.0])),
            ("b".to_string(), Tensor::vector(vec![2.0])),
            ("frozen".to_string(), Tensor::vector(vec![1.0])),
        ]);
        opt.step(&mut s, &grads, 0.1).unwrap();
        let w = s.tensor("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
        assert!((s.tensor("b").unwrap().data()[0] - 0.4).abs() < 1e-6);
        assert_eq!(s.tensor("frozen").unwrap().data(), &[3.0]);
        assert!(!opt.slots.contains_key("frozen"));
    }

    #[test]
    fn decay_is_decoupled_and_selective() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut s = store();
        let mut opt = AdamW::new(&cfg);
        let grads = BTreeMap::from([
            ("w".to_string(), Tensor::vector(vec![0.0, 0.0])),
            ("b".to_string(), Tensor::vector(vec![0.0])),
        ]);
        opt.step(&mut s, &grads, 0.1).unwrap();
        assert_eq!(s.tensor("w").unwrap().data(), &[0.95, -1.9]);
        assert_eq!(s.tensor("b").unwrap().data(), &[0.5]);
    }

    #[test]
    fn nan_gradient_aborts_before_writing() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&TrainConfig::default());
        let grads = BTreeMap::from([
            ("b".to_string(), Tensor::vector(vec![1.0])),
            ("w".to_string(), Tensor::vector(vec![f32::NAN, 0.0])),
        ]);
        let err = opt.step(&mut s, &grads, 0.1).unwrap_err();
        assert_eq!(err.category(), "numeric");
        assert_eq!(s, before);
        assert!(opt.slots.is_empty());
    }
}
