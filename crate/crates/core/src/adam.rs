use alloc::string::ToString;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

/// Bias-corrected Adam; moments live on each [`crate::params::Parameter`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// Apply one update. Gradients are validated before any parameter moves,
    /// so a NaN leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidUse(
                "gradient buffers do not match the parameter store".to_string(),
            ));
        }
        for (id, p) in store.iter() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(alloc::format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, p) in store.iter_mut().enumerate() {
            let g = &grads.bufs[i];
            let value = p.value.data_mut();
            for j in 0..g.len() {
                p.m[j] = b1 * p.m[j] + (1.0 - b1) * g[j];
                p.v[j] = b2 * p.v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = p.m[j] / c1;
                let vhat = p.v[j] / c2;
                value[j] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}
