//! Adam with per-parameter moments keyed by parameter name.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn insert_moments(&mut self, name: String, moments: Moments) {
        self.moments.insert(name, moments);
    }

    /// Applies one update to every parameter of `params` accepted by `select`
    /// that received a gradient.
    pub fn step(
        &mut self,
        params: &ParamStore,
        grads: &GradStore,
        lr: f64,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, var) in params.iter() {
            if !select(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let slot = match self.moments.get_mut(name) {
                Some(s) => s,
                None => {
                    let zeros = var.as_tensor().zeros_like()?;
                    self.moments.insert(
                        name.clone(),
                        Moments {
                            m: zeros.clone(),
                            v: zeros,
                            steps: 0,
                        },
                    );
                    self.moments.get_mut(name).expect("just inserted")
                }
            };
            if slot.m.dims() != var.dims() {
                return Err(Error::shape(format!("optimizer moments for {name} have stale shape")));
            }
            slot.steps += 1;
            let m = ((&slot.m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let t = slot.steps as i32;
            let m_hat = (&m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&v / (1.0 - beta2.powi(t)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }
}
