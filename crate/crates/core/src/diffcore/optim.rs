//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::param::{ParamGroup, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub backbone: f64,
    pub head: f64,
    pub weighting: f64,
}

impl GroupRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Head => self.head,
            ParamGroup::Weighting => self.weighting,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.backbone *= factor;
        self.head *= factor;
        self.weighting *= factor;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub rates: GroupRates,
    pub step: u64,
    /// Keyed by parameter name; created zeroed on first use.
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, rates: GroupRates) -> Self {
        Self { config, rates, step: 0, moments: BTreeMap::new() }
    }

    /// One update of every parameter in `params`, then clears their
    /// gradients. Fails without touching anything if a gradient is missing.
    ///
    /// Weight decay is applied to the backbone and head groups only; the
    /// loss-weighting scalars are not shrunk toward zero.
    pub fn step<S: Scalar>(&mut self, params: &[&Parameter<S>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.tensor().has_grad()) {
            return Err(Error::MissingGrad(p.name().to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in params {
            let lr = self.rates.get(p.group());
            let decay = if p.group() == ParamGroup::Weighting { 0.0 } else { weight_decay };
            let n = p.tensor().numel();
            let m = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| Moments { first: vec![0.0; n], second: vec![0.0; n] });
            p.tensor().update_in_place(|w, g| {
                let g = g.expect("checked above");
                for i in 0..n {
                    let gi = g[i].to_f64_lossy();
                    m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * gi;
                    m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * gi * gi;
                    let mhat = m.first[i] / bc1;
                    let vhat = m.second[i] / bc2;
                    let mut wi = w[i].to_f64_lossy();
                    wi -= lr * decay * wi;
                    wi -= lr * mhat / (vhat.sqrt() + eps);
                    w[i] = S::lit(wi);
                }
            });
            p.tensor().zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamStore;

    fn rates(lr: f64) -> GroupRates {
        GroupRates { backbone: lr, head: lr, weighting: lr }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamGroup::Head, vec![0.3, -1.2], &[2]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, rates(1e-3));
        w.scale(0.0).sum_all().backward().unwrap();
        let params: Vec<_> = store.iter().collect();
        opt.step(&params).unwrap();
        assert_eq!(w.to_vec(), vec![0.3, -1.2]);
        assert_eq!(opt.step, 1);
        assert!(!w.has_grad());
    }

    #[test]
    fn single_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamGroup::Head, vec![1.0], &[1]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, rates(1e-3));
        w.sum_all().backward().unwrap();
        opt.step(&store.iter().collect::<Vec<_>>()).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((w.item() - expect).abs() < 1e-15);
        assert!((w.item() - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn group_rates_scale_updates() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamGroup::Backbone, vec![0.5], &[1]).unwrap();
        let b = store.add("b", ParamGroup::Head, vec![0.5], &[1]).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, GroupRates { backbone: 1e-5, head: 1e-3, weighting: 1e-3 });
        a.add(&b).unwrap().scale(0.7).sum_all().backward().unwrap();
        opt.step(&store.iter().collect::<Vec<_>>()).unwrap();
        let ratio = (b.item() - 0.5) / (a.item() - 0.5);
        assert!((ratio - 100.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("backbone.x", ParamGroup::Backbone, vec![0.5], &[1]).unwrap();
        store.add("head.y", ParamGroup::Head, vec![0.5], &[1]).unwrap();
        a.sum_all().backward().unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default(), rates(1e-3));
        let err = opt.step(&store.iter().collect::<Vec<_>>()).unwrap_err();
        assert!(err.to_string().contains("head.y"));
        assert_eq!(opt.step, 0);
        assert_eq!(a.item(), 0.5);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamGroup::Head, vec![2.0], &[1]).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default(), rates(0.1));
        w.scale(0.0).sum_all().backward().unwrap();
        opt.step(&store.iter().collect::<Vec<_>>()).unwrap();
        assert!((w.item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }
}
