use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        for (name, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments; moment stores mirror the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &GradStore<T>) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::Invariant(
                "gradient or moment layout differs from the parameters".to_string(),
            ));
        }
        self.step += 1;
        let c = &self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let step_size = T::from_f64(c.lr / bias1);
        let inv_sqrt_bias2 = T::from_f64(1.0 / bias2.sqrt());
        let eps = T::from_f64(c.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let denom = vv.sqrt() * inv_sqrt_bias2 + eps;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(())
    }
}
