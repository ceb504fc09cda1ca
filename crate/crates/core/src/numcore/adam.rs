use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every TRAINABLE parameter that has a
/// gradient. FROZEN parameters are never touched.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in store.params_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = p.grad.as_ref() else { continue };
        let value = Arc::make_mut(&mut p.value);
        for (((x, m), v), g) in value
            .data_mut()
            .iter_mut()
            .zip(p.m.iter_mut())
            .zip(p.v.iter_mut())
            .zip(g)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParameterStore::new();
        let w = s.add("w", Tensor::vector(&[1.0, -2.0]), true);
        s.accumulate_grad(w, &[0.0, 0.0], 1.0);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(w).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        let w = s.add("w", Tensor::vector(&[0.0]), true);
        s.accumulate_grad(w, &[1.0], 1.0);
        adam_step(&mut s, &AdamConfig::with_lr(0.1)).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.value(w).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut s = ParameterStore::new();
        let f = s.add("f", Tensor::vector(&[0.25]), false);
        s.accumulate_grad(f, &[5.0], 1.0);
        let before = s.to_bytes(&Default::default());
        for _ in 0..10 {
            adam_step(&mut s, &AdamConfig::with_lr(0.5)).unwrap();
        }
        assert_eq!(s.to_bytes(&Default::default()), before);
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let mut s = ParameterStore::new();
        assert!(matches!(
            adam_step(&mut s, &AdamConfig::with_lr(0.0)),
            Err(Error::Config { field: "lr", .. })
        ));
    }
}
