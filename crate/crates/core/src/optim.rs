//! SGD with momentum and Adam, with state keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig::SgdMomentum { momentum: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    state: BTreeMap<String, Slot>,
}

/// Gradients aligned with a [`ModelParams`] storage order; `None` where a
/// parameter received no gradient.
pub type ParamGrads = Vec<Option<Vec<f32>>>;

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            state: BTreeMap::new(),
        }
    }

    /// Updates one tensor in place.
    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape {
                op: "optimizer_step",
                detail: format!("{name}: {} params vs {} grads", param.len(), grad.len()),
            });
        }
        let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
            first: vec![0.0; param.len()],
            second: Vec::new(),
            steps: 0,
        });
        slot.steps += 1;
        match self.cfg {
            OptimizerConfig::SgdMomentum { momentum } => {
                for ((w, &g), v) in param.iter_mut().zip(grad).zip(slot.first.iter_mut()) {
                    *v = momentum * *v + g as f64;
                    *w = (*w as f64 - self.lr * *v) as f32;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                if slot.second.is_empty() {
                    slot.second = vec![0.0; param.len()];
                }
                let t = slot.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, &g), m), v) in param
                    .iter_mut()
                    .zip(grad)
                    .zip(slot.first.iter_mut())
                    .zip(slot.second.iter_mut())
                {
                    let g = g as f64;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let step = self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    *w = (*w as f64 - step) as f32;
                }
            }
        }
        Ok(())
    }

    /// Steps every parameter accepted by `select`, after rescaling their
    /// gradients to a global L2 norm of at most `clip` (if given). Consumed
    /// gradients are cleared. Returns the pre-clip global norm.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &mut ParamGrads,
        select: impl Fn(&str) -> bool,
        clip: Option<f64>,
    ) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} gradient slots for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let mut sq = 0.0f64;
        for ((name, _), g) in params.iter().zip(grads.iter()) {
            if !select(name) {
                continue;
            }
            let g = g.as_ref().ok_or_else(|| Error::MissingGrad(name.to_string()))?;
            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let scale = match clip {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        for ((name, tensor), g) in params.iter_mut().zip(grads.iter_mut()) {
            if !select(name) {
                continue;
            }
            let mut g = g.take().expect("checked above");
            if scale != 1.0 {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            self.update(name, tensor.data_mut(), &g)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_identity() {
        for cfg in [OptimizerConfig::sgd(), OptimizerConfig::default()] {
            let mut opt = Optimizer::new(cfg, 0.0);
            let mut w = [1.5f32, -2.0];
            opt.update("w", &mut w, &[0.3, 4.0]).unwrap();
            assert_eq!(w, [1.5, -2.0]);
        }
    }

    #[test]
    fn sgd_quadratic_step() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(), 0.1);
        let mut w = [1.0f32];
        let g = [2.0 * w[0]];
        opt.update("w", &mut w, &g).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Scalar simulation of the same recurrence in f64.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut oracle_hit = None;
        for t in 1..=500i32 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            if w.abs() < 1e-3 && oracle_hit.is_none() {
                oracle_hit = Some(t as u32);
            }
        }
        let mut opt = Optimizer::new(OptimizerConfig::default(), lr);
        let mut p = [1.0f32];
        let mut hit = None;
        for t in 1..=500u32 {
            let g = [2.0 * p[0]];
            opt.update("w", &mut p, &g).unwrap();
            if p[0].abs() < 1e-3 && hit.is_none() {
                hit = Some(t);
            }
        }
        assert!(oracle_hit.is_some(), "oracle never reached 1e-3");
        assert!(hit.is_some(), "adam did not reach |w| < 1e-3 in 500 steps");
        assert!(w.abs() < 1e-3 && p[0].abs() < 1e-3, "oracle {w}, optimizer {}", p[0]);
        assert!(hit.unwrap().abs_diff(oracle_hit.unwrap()) <= 2);
    }
}
