use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::param::{check_matching, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam over one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Option<Vec<(String, Tensor, Tensor)>>,
}

impl AdamState {
    /// Creates an uninitialized state; call [`AdamState::init`] before stepping.
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: None }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        let mut s = Self::new(config);
        s.init(store);
        s
    }

    pub fn init(&mut self, store: &ParamStore) {
        self.moments = Some(
            store
                .iter()
                .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
                .collect(),
        );
        self.step = 0;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from the accumulated gradients. Gradients are left as-is.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let moments = self.moments.as_mut().ok_or(AutodiffError::UninitializedOptimizer)?;
        if moments.len() != store.len() {
            return Err(AutodiffError::ParameterMismatch(format!(
                "optimizer tracks {} parameters, store has {}",
                moments.len(),
                store.len()
            )));
        }
        for ((name, m, _), p) in moments.iter().zip(store.iter()) {
            if *name != p.name || m.shape() != p.value.shape() {
                return Err(AutodiffError::ParameterMismatch(format!("optimizer slot `{name}` vs parameter `{}`", p.name)));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((_, m, v), p) in moments.iter_mut().zip(store.iter_mut()) {
            let grad = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Polyak averaging: `target <- (1 - alpha) * target + alpha * online`.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, alpha: f64) -> Result<()> {
    check_matching(target, online)?;
    for (t, o) in target.iter_mut().zip(online.iter()) {
        for (a, b) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *a = (1.0 - alpha) * *a + alpha * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        store.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        let mut adam = AdamState::for_store(AdamConfig::with_lr(0.1), &store);
        adam.step(&mut store).unwrap();
        let w = store.iter().next().unwrap().value.item();
        assert!((w + 0.1).abs() < 1e-6, "{w}");
        // gradients are not cleared by the step
        assert_eq!(store.iter().next().unwrap().grad.item(), 1.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut store = scalar_store(1.5);
        let mut adam = AdamState::for_store(AdamConfig::with_lr(0.1), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.iter().next().unwrap().value.item(), 1.5);
    }

    #[test]
    fn uninitialized_state_errors() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut store), Err(AutodiffError::UninitializedOptimizer)));
    }

    #[test]
    fn ema_blends() {
        let mut target = scalar_store(0.0);
        let online = scalar_store(1.0);
        ema_update(&mut target, &online, 0.005).unwrap();
        assert!((target.iter().next().unwrap().value.item() - 0.005).abs() < 1e-15);
        ema_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target.iter().next().unwrap().value.item(), 1.0);
        let before = scalar_store(0.25);
        let mut t2 = scalar_store(0.25);
        ema_update(&mut t2, &online, 0.0).unwrap();
        assert_eq!(t2.iter().next().unwrap().value, before.iter().next().unwrap().value);
    }

    #[test]
    fn ema_rejects_mismatched_names() {
        let mut target = scalar_store(0.0);
        let mut online = ParamStore::new();
        online.insert("v", Tensor::scalar(1.0)).unwrap();
        assert!(ema_update(&mut target, &online, 0.5).is_err());
    }
}
