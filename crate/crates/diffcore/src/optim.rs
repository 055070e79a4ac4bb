//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.eps < 0.0 {
            return Err(Error::Config(format!("eps must be nonnegative, got {}", self.eps)));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `value` in place. `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    config: &AdamConfig,
    t: u64,
) -> Result<()> {
    config.validate()?;
    if t == 0 {
        return Err(Error::Contract("Adam step count starts at 1".into()));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = *config;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let denom = v_hat.sqrt() + eps;
        if denom > 0.0 {
            value[i] -= lr * m_hat / denom;
        }
    }
    Ok(())
}

/// Adam over a fixed group of parameters, owning the moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let m = params.iter().map(|&id| vec![0.0; store.value(id).len()]).collect::<Vec<_>>();
        let v = m.clone();
        Ok(Self {
            config,
            params,
            m,
            v,
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        let config = AdamConfig { lr, ..self.config };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// First and second moment buffers, in `params()` order.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores state previously read from [`moments`](Adam::moments).
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let shapes_ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !shapes_ok {
            return Err(Error::Contract("optimizer state does not match parameter group".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update to every parameter in the group that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        for (k, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.as_ref() else { continue };
            let grad = grad.data().to_vec();
            adam_update(
                p.value.data_mut(),
                &grad,
                &mut self.m[k],
                &mut self.v[k],
                &self.config,
                self.t,
            )?;
            if !p.value.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}
