//! Prototype nearest-neighbour loss, weighted cross-entropy and the
//! cross-episode prototype registry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub prototype: Vec<f32>,
    pub count: u64,
}

/// Learned reference prototype per train class, merged across episodes by an
/// exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeRegistry {
    entries: BTreeMap<u8, RegistryEntry>,
    momentum: f32,
}

impl Default for PrototypeRegistry {
    fn default() -> Self {
        Self::new(0.9)
    }
}

impl PrototypeRegistry {
    pub fn new(momentum: f32) -> Self {
        Self {
            entries: BTreeMap::new(),
            momentum,
        }
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, k: u8) -> bool {
        self.entries.contains_key(&k)
    }

    pub fn get(&self, k: u8) -> Option<&RegistryEntry> {
        self.entries.get(&k)
    }

    /// Entries in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (u8, &RegistryEntry)> {
        self.entries.iter().map(|(&k, e)| (k, e))
    }

    pub fn insert(&mut self, k: u8, entry: RegistryEntry) {
        self.entries.insert(k, entry);
    }

    /// First observation sets the entry; later ones blend it in with weight
    /// `1 - momentum`.
    pub fn update(&mut self, k: u8, p_hat: &[f32]) -> Result<()> {
        if p_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "update_registry" });
        }
        let m = self.momentum;
        match self.entries.get_mut(&k) {
            None => {
                self.entries.insert(
                    k,
                    RegistryEntry {
                        prototype: p_hat.to_vec(),
                        count: 1,
                    },
                );
            }
            Some(e) => {
                if e.prototype.len() != p_hat.len() {
                    return Err(Error::Shape {
                        op: "update_registry",
                        detail: format!("{} vs {} dims", e.prototype.len(), p_hat.len()),
                    });
                }
                for (dst, &v) in e.prototype.iter_mut().zip(p_hat) {
                    *dst = m * *dst + (1.0 - m) * v;
                }
                e.count += 1;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    Fixed(f64),
    /// `#background / #foreground` of each target slice.
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta_mode: BetaMode,
    pub beta_clamp: [f64; 2],
    /// Multiplies the cosine similarities before the softmax.
    pub temperature: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta_mode: BetaMode::InverseFrequency,
            beta_clamp: [1.0, 100.0],
            temperature: 1.0,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let BetaMode::Fixed(b) = self.beta_mode {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("beta must be >= 0, got {b}")));
            }
        }
        let [lo, hi] = self.beta_clamp;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("bad beta clamp {:?}", self.beta_clamp)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("eps must be in (0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }

    /// Positive-class weight for one binary target slice.
    pub fn beta_for<T: Scalar>(&self, target: &[T]) -> f64 {
        match self.beta_mode {
            BetaMode::Fixed(b) => b,
            BetaMode::InverseFrequency => {
                let fg = target.iter().filter(|&&y| y > T::of(0.5)).count();
                if fg == 0 {
                    1.0
                } else {
                    let bg = target.len() - fg;
                    (bg as f64 / fg as f64).clamp(self.beta_clamp[0], self.beta_clamp[1])
                }
            }
        }
    }
}

/// `-log softmax_k(tau * cos(p_hat, p_k'))` over every registry class.
/// Registry prototypes enter as constants.
pub fn nn_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_hat: Var,
    registry: &PrototypeRegistry,
    k: u8,
    cfg: &LossConfig,
) -> Result<Var> {
    let target = registry
        .iter()
        .position(|(c, _)| c == k)
        .ok_or(Error::MissingClass(k as u32))?;
    let dim = tape.value(p_hat).numel();
    let tau = T::of(cfg.temperature);
    let mut logits = Vec::with_capacity(registry.len());
    for (_, entry) in registry.iter() {
        let data: Vec<T> = entry.prototype.iter().map(|&v| T::of(v as f64)).collect();
        let reference = tape.constant(Tensor::new(vec![dim], data)?)?;
        let sim = tape.cosine_similarity(p_hat, reference)?;
        logits.push(tape.scale(sim, tau)?);
    }
    let stacked = tape.stack(&logits)?;
    tape.neg_log_softmax(stacked, target)
}

/// Weighted binary cross-entropy of probabilities `pred` against a binary
/// `target` of the same shape. Returns the loss and the weight used.
pub fn weighted_ce<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var, f64)> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::Shape {
            op: "weighted_ce",
            detail: format!("{:?} vs {:?}", tape.value(pred).shape(), target.shape()),
        });
    }
    let beta = cfg.beta_for(target.data());
    let loss = tape.weighted_bce(pred, target.data(), T::of(beta), T::of(cfg.eps))?;
    Ok((loss, beta))
}

/// Unit-weighted sum of the two objectives.
pub fn total_loss(nn: f64, wce: f64) -> Result<f64> {
    if !nn.is_finite() || !wce.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(nn + wce)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape<f64>, v: &[f64], grad: bool) -> Var {
        tape.leaf(Tensor::new(vec![v.len()], v.to_vec()).unwrap(), grad).unwrap()
    }

    fn registry(entries: &[(u8, &[f32])]) -> PrototypeRegistry {
        let mut r = PrototypeRegistry::default();
        for &(k, p) in entries {
            r.update(k, p).unwrap();
        }
        r
    }

    fn nn_value(p: &[f64], reg: &PrototypeRegistry, k: u8, cfg: &LossConfig) -> f64 {
        let mut tape = Tape::new();
        let v = vec_var(&mut tape, p, true);
        let loss = nn_loss(&mut tape, v, reg, k, cfg).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn single_class_is_zero() {
        let reg = registry(&[(2, &[1.0, 2.0, 3.0])]);
        assert_eq!(nn_value(&[0.3, -1.0, 2.0], &reg, 2, &LossConfig::default()), 0.0);
    }

    #[test]
    fn equal_similarities_give_ln_k() {
        let p = [1.0, 0.0, 0.0, 0.0, 0.0];
        let others: [&[f32]; 4] = [
            &[0.0, 1.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        let reg = registry(&[(1, others[0]), (2, others[1]), (3, others[2]), (4, others[3])]);
        let v = nn_value(&p, &reg, 3, &LossConfig::default());
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((v - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn two_class_value() {
        let reg = registry(&[(1, &[1.0, 0.0]), (2, &[0.0, 1.0])]);
        let v = nn_value(&[2.0, 0.0], &reg, 1, &LossConfig::default());
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn missing_class() {
        let reg = registry(&[(1, &[1.0, 0.0])]);
        let mut tape = Tape::new();
        let v = vec_var(&mut tape, &[1.0, 1.0], false);
        assert!(matches!(
            nn_loss(&mut tape, v, &reg, 3, &LossConfig::default()),
            Err(Error::MissingClass(3))
        ));
    }

    #[test]
    fn registry_rescaling_keeps_loss() {
        let reg = registry(&[(1, &[1.0, 0.5, -0.2]), (2, &[0.1, 0.9, 0.3]), (3, &[-0.4, 0.2, 1.0])]);
        let mut scaled = reg.clone();
        let e = scaled.get(2).unwrap().clone();
        scaled.insert(
            2,
            RegistryEntry {
                prototype: e.prototype.iter().map(|v| v * 4.0).collect(),
                count: e.count,
            },
        );
        let p = [0.3, 0.7, 0.1];
        let a = nn_value(&p, &reg, 1, &LossConfig::default());
        let b = nn_value(&p, &scaled, 1, &LossConfig::default());
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn registry_update_rules() {
        let mut reg = PrototypeRegistry::new(0.9);
        reg.update(1, &[1.0, 2.0]).unwrap();
        assert_eq!(reg.get(1).unwrap().prototype, vec![1.0, 2.0]);
        reg.update(1, &[3.0, 2.0]).unwrap();
        let e = reg.get(1).unwrap();
        assert!((e.prototype[0] - 1.2).abs() < 1e-6);
        assert_eq!(e.count, 2);
        for _ in 0..400 {
            reg.update(1, &[3.0, 2.0]).unwrap();
        }
        let e = reg.get(1).unwrap();
        assert!((e.prototype[0] - 3.0).abs() < 1e-4 && (e.prototype[1] - 2.0).abs() < 1e-6);
        assert!(reg.update(1, &[f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn weighted_ce_single_pixel() {
        let cfg = LossConfig {
            beta_mode: BetaMode::Fixed(2.0),
            ..LossConfig::default()
        };
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap(), true).unwrap();
        let y = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let (loss, beta) = weighted_ce(&mut tape, p, &y, &cfg).unwrap();
        assert_eq!(beta, 2.0);
        let v = tape.value(loss).item();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let cfg = LossConfig {
            beta_mode: BetaMode::Fixed(3.0),
            ..LossConfig::default()
        };
        let eps = cfg.eps;
        let y = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape
            .constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let (loss, beta) = weighted_ce(&mut tape, p, &y, &cfg).unwrap();
        assert!(tape.value(loss).item() <= 2.0 * eps * beta);
    }

    #[test]
    fn inverse_frequency_beta() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.beta_for(&[0.0f32; 10]), 1.0);
        assert_eq!(cfg.beta_for(&[1.0f32, 0.0, 0.0, 0.0]), 3.0);
        let mut sparse = vec![0.0f32; 1000];
        sparse[0] = 1.0;
        assert_eq!(cfg.beta_for(&sparse), 100.0);
        let mut dense = vec![1.0f32; 10];
        dense[0] = 0.0;
        assert_eq!(cfg.beta_for(&dense), 1.0);
    }

    #[test]
    fn total_is_sum() {
        assert_eq!(total_loss(0.0, 1.5).unwrap(), 1.5);
        assert_eq!(total_loss(1.5, 0.0).unwrap(), 1.5);
        assert!((total_loss(0.313262, 1.386294).unwrap() - 1.699556).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 0.0).is_err());
    }
}
