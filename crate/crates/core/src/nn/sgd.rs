use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{RamError, Result};

/// Step-decay SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_epoch_period: usize,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.001,
            decay_factor: 0.1,
            decay_epoch_period: 10,
            momentum: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it turns a stage into a parameter no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RamError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(RamError::Config(format!(
                "decay factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_epoch_period == 0 {
            return Err(RamError::Config("decay period must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(RamError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// `base * decay^floor(epoch / period)`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_epoch_period) as i32;
        self.learning_rate * self.decay_factor.powi(steps)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        SgdState {
            config,
            velocity: BTreeMap::new(),
        }
    }
}

/// `p <- p - lr(epoch) * g` for every trainable parameter, then zeroes `grads`.
pub fn sgd_step(params: &mut ParamStore, grads: &mut Gradients, state: &mut SgdState, epoch: usize) -> Result<()> {
    let names = params.param_names();
    if let Some(missing) = names.iter().find(|n| !grads.contains_key(*n)) {
        return Err(RamError::Model(format!("no gradient for parameter `{missing}`")));
    }
    let lr = state.config.learning_rate_at(epoch);
    let momentum = state.config.momentum;
    for name in &names {
        let g = &grads[name];
        let p = params.param_mut(name)?;
        if g.len() != p.numel() {
            return Err(RamError::shape(format!("gradient of {name}"), &[g.len()], p.shape()));
        }
        if momentum > 0.0 {
            let v = state
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        } else {
            for (pv, gv) in p.data_mut().iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }
    for g in grads.values_mut() {
        g.fill(0.0);
    }
    Ok(())
}
