//! Adam with bias correction and decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_wd() -> f64 {
    0.01
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_wd(),
            betas: default_betas(),
            epsilon: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("optimizer: need lr > 0 and betas in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer: need epsilon > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub first_moment: Vec<Array2<f64>>,
    pub second_moment: Vec<Array2<f64>>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, adapter: &Adapter) -> Self {
        Self {
            config,
            first_moment: adapter.zero_grads(),
            second_moment: adapter.zero_grads(),
            step_count: 0,
        }
    }

    /// Applies one update. Returns `Ok(false)` and leaves everything
    /// untouched when a gradient entry is not finite.
    pub fn step(&mut self, adapter: &mut Adapter, grads: &[Array2<f64>]) -> Result<bool> {
        let mut params = adapter.params_mut();
        if grads.len() != params.len()
            || grads.iter().zip(&params).any(|(g, p)| g.dim() != p.dim())
            || self.first_moment.len() != params.len()
        {
            return Err(Error::Shape("gradient shapes do not match adapter parameters".into()));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            log::warn!("non-finite gradient at step {}; update skipped", self.step_count + 1);
            return Ok(false);
        }
        let OptimizerConfig {
            lr,
            weight_decay,
            betas: (b1, b2),
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + epsilon);
                *p -= lr * update + lr * weight_decay * *p;
            });
        }
        Ok(true)
    }
}
