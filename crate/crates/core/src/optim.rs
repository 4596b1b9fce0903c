//! AdamW over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.6,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::range(
                "learning_rate",
                self.learning_rate,
                "finite and >= 0",
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::range(name, b, "in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::range("weight_decay", self.weight_decay, ">= 0"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::range("eps", self.eps, "> 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ParamSet,
    pub second: ParamSet,
    pub steps: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }
}

/// Row vectors (biases, gains, shifts) are not decayed.
fn decays(m: &Matrix) -> bool {
    m.rows > 1
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    params.ensure_matches(&state.first, "optimizer moments")?;
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.learning_rate;
    for (k, g) in grads.iter().enumerate() {
        let p = &mut params.values_mut()[k];
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient {k} is {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let decay = if decays(p) { cfg.weight_decay } else { 0.0 };
        let m = &mut state.first.values_mut()[k];
        let v = &mut state.second.values_mut()[k];
        for i in 0..g.data.len() {
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g.data[i];
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
            let update = (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + cfg.eps);
            p.data[i] -= lr * (update + decay * p.data[i]);
        }
    }
    Ok(())
}
