//! Adam and RAdam with optional Lookahead.

use std::fmt;
use std::str::FromStr;

use odetensor::Tensor;

use crate::error::{ReconError, Result};
use crate::params::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    RAdam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RAdam => "radam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "radam" => Ok(OptimizerKind::RAdam),
            _ => Err(ReconError::Config(format!("unknown optimizer {s:?}; expected adam or radam"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lookahead {
    pub k: usize,
    pub alpha: f64,
}

impl Default for Lookahead {
    fn default() -> Self {
        Lookahead { k: 5, alpha: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub lookahead: Option<Lookahead>,
}

pub struct Optimizer {
    cfg: OptimConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    slow: Option<Vec<Vec<f32>>>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, params: &ParamSet<f32>) -> Result<Self> {
        if !(cfg.learning_rate >= 0.0) {
            return Err(ReconError::Config(format!("learning rate must be non-negative, got {}", cfg.learning_rate)));
        }
        if let Some(la) = cfg.lookahead {
            if la.k == 0 || !(0.0..=1.0).contains(&la.alpha) {
                return Err(ReconError::Config(format!("lookahead needs k ≥ 1 and α in [0, 1], got {la:?}")));
            }
        }
        let zeros = || params.values().iter().map(|t| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Ok(Optimizer {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
            slow: cfg.lookahead.map(|_| params.values().iter().map(|t| t.data().to_vec()).collect()),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Gradients must follow the parameter order.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(ReconError::Dimension(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (name, (p, g)) in params.names().iter().zip(params.values().iter().zip(grads)) {
            if p.shape() != g.shape() {
                return Err(ReconError::Dimension(format!("gradient of {name} has shape {:?}, expected {:?}", g.shape(), p.shape())));
            }
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(ReconError::Numeric(format!("NaN gradient for parameter {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        // Rectification term; `None` means the variance estimate is not yet
        // trusted and the update falls back to momentum SGD.
        let rect = match self.cfg.kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::RAdam => {
                let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
                let rho = rho_inf - 2.0 * t as f64 * BETA2.powi(t) / bc2;
                (rho > 5.0).then(|| {
                    (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
                })
            }
        };
        let lr = self.cfg.learning_rate;
        for (k, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi as f64;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let update = match rect {
                    Some(r) => r * m_hat / ((v[i] / bc2).sqrt() + EPSILON),
                    None => m_hat,
                };
                *w = (*w as f64 - lr * update) as f32;
            }
        }
        if let (Some(la), Some(slow)) = (self.cfg.lookahead, self.slow.as_mut()) {
            if self.step % la.k as u64 == 0 {
                let a = la.alpha as f32;
                for (p, s) in params.values_mut().iter_mut().zip(slow.iter_mut()) {
                    for (w, sw) in p.data_mut().iter_mut().zip(s.iter_mut()) {
                        *sw = (1.0 - a) * *sw + a * *w;
                        *w = *sw;
                    }
                }
            }
        }
        Ok(())
    }
}
