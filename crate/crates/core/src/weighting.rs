//! Multi-task loss aggregation: fixed uniform weights, dynamic weight
//! averaging (DWA), restrained revised uncertainty weighting (RRUW) and
//! their additive combination (DRUW).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamGroup, ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower bound kept on `log α_k`. The regularizer `log(1 + log α²)` is
/// only defined for `log α > -1/2`.
pub const LOG_ALPHA_FLOOR: f64 = -0.49;

pub const LOG_ALPHA_PARAM: &str = "weighting.log_alpha";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Dwa,
    Rruw,
    Druw,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Uniform, Strategy::Dwa, Strategy::Rruw, Strategy::Druw];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Dwa => "dwa",
            Strategy::Rruw => "rruw",
            Strategy::Druw => "druw",
        }
    }

    pub fn uses_dwa(self) -> bool {
        matches!(self, Strategy::Dwa | Strategy::Druw)
    }

    pub fn uses_uncertainty(self) -> bool {
        matches!(self, Strategy::Rruw | Strategy::Druw)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weighting strategy `{s}`")))
    }
}

/// Loss history for dynamic weight averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwaState {
    temperature: f64,
    tasks: usize,
    /// Most recent epoch last; at most two entries.
    history: VecDeque<Vec<f64>>,
}

impl DwaState {
    pub fn new(tasks: usize, temperature: f64) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Config("DWA needs at least one task".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("DWA temperature must be positive, got {temperature}")));
        }
        Ok(Self { temperature, tasks, history: VecDeque::with_capacity(2) })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Stored epoch means, oldest first.
    pub fn history(&self) -> impl Iterator<Item = &[f64]> {
        self.history.iter().map(Vec::as_slice)
    }

    /// Appends one epoch's per-task mean losses.
    pub fn record_epoch(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.tasks {
            return Err(Error::shape("dwa", format!("expected {} task losses, got {}", self.tasks, losses.len())));
        }
        if self.history.len() == 2 {
            self.history.pop_front();
        }
        self.history.push_back(losses.to_vec());
        Ok(())
    }

    /// Task weights `λ_k`; all ones until two epochs are recorded.
    pub fn weights(&self) -> Result<Vec<f64>> {
        if self.history.len() < 2 {
            return Ok(vec![1.0; self.tasks]);
        }
        let (older, newer) = (&self.history[0], &self.history[1]);
        if let Some(bad) = older.iter().chain(newer).find(|&&l| !(l > 0.0)) {
            return Err(Error::domain("dwa", format!("historical loss must be positive, got {bad}")));
        }
        let ratios: Vec<f64> = newer.iter().zip(older).map(|(n, o)| n / o).collect();
        Ok(weights_from_ratios(&ratios, self.temperature))
    }
}

/// `K · softmax(r / T)`.
pub fn weights_from_ratios(ratios: &[f64], temperature: f64) -> Vec<f64> {
    let k = ratios.len() as f64;
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = ratios.iter().map(|r| ((r - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| k * v / z).collect()
}

pub fn dwa_weights(state: &DwaState) -> Result<Vec<f64>> {
    state.weights()
}

/// Trainable uncertainty weights, stored as `log α` so that `α > 0`.
#[derive(Debug, Clone)]
pub struct UncertaintyState<S: Scalar> {
    log_alpha: Tensor<S>,
    phi: f64,
}

impl<S: Scalar> UncertaintyState<S> {
    /// Registers `K` weights (initialized to `α = 1`) in the weighting group.
    pub fn new(store: &mut ParamStore<S>, tasks: usize, phi: f64) -> Result<Self> {
        if !(phi > 0.0) {
            return Err(Error::Config(format!("φ must be positive, got {phi}")));
        }
        let log_alpha = store.add_const(LOG_ALPHA_PARAM, ParamGroup::Weighting, &[tasks], 0.0)?;
        Ok(Self { log_alpha, phi })
    }

    /// Standalone state with explicit `α` values (tests, analysis).
    pub fn with_alphas(alphas: &[f64], phi: f64) -> Result<Self> {
        if let Some(bad) = alphas.iter().find(|&&a| !(a > 0.0)) {
            return Err(Error::domain("uncertainty", format!("α must be positive, got {bad}")));
        }
        let logs = alphas.iter().map(|a| S::lit(a.ln())).collect();
        Ok(Self { log_alpha: Tensor::leaf(logs, &[alphas.len()])?, phi })
    }

    /// Wraps an existing `log α` tensor.
    pub fn from_log_alpha(log_alpha: Tensor<S>, phi: f64) -> Result<Self> {
        if log_alpha.ndim() != 1 {
            return Err(Error::shape("uncertainty", format!("log α must be a vector, got {:?}", log_alpha.shape())));
        }
        Ok(Self { log_alpha, phi })
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn tasks(&self) -> usize {
        self.log_alpha.numel()
    }

    pub fn log_alpha(&self) -> &Tensor<S> {
        &self.log_alpha
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.log_alpha.data().iter().map(|s| s.to_f64_lossy().exp()).collect()
    }

    /// `|Σ_k |log α_k| − φ|`.
    pub fn constraint_gap(&self) -> f64 {
        let total: f64 = self.log_alpha.data().iter().map(|s| s.to_f64_lossy().abs()).sum();
        (total - self.phi).abs()
    }

    /// Clamps `log α` back into the domain of the regularizer.
    pub fn project(&self) {
        let floor = S::lit(LOG_ALPHA_FLOOR);
        self.log_alpha.update_in_place(|w, _| w.iter_mut().for_each(|s| *s = s.max(floor)));
    }

    pub fn parameter<'a>(&self, store: &'a ParamStore<S>) -> Option<&'a Parameter<S>> {
        store.get(LOG_ALPHA_PARAM)
    }

    /// `Σ log(1 + log α_k²) + |φ − Σ |log α_k||`.
    fn penalty(&self) -> Result<Tensor<S>> {
        let s = &self.log_alpha;
        if let Some(bad) = s.data().iter().find(|&&v| !(v.to_f64_lossy() > -0.5)) {
            return Err(Error::domain("uncertainty", format!("log(1 + log α²) undefined at log α = {bad}")));
        }
        let reg = s.scale(S::lit(2.0)).add_scalar(S::one()).log()?.sum_all();
        let constraint = s.abs().sum_all().neg().add_scalar(S::lit(self.phi)).abs();
        reg.add(&constraint)
    }
}

fn stack<S: Scalar>(losses: &[Tensor<S>]) -> Result<Tensor<S>> {
    if losses.is_empty() {
        return Err(Error::shape("weighting", "no task losses"));
    }
    let flat = losses
        .iter()
        .map(|l| {
            if l.numel() != 1 {
                return Err(Error::shape("weighting", format!("task loss must be scalar, got {:?}", l.shape())));
            }
            l.reshape(&[1])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&flat.iter().collect::<Vec<_>>(), 0)
}

fn constant<S: Scalar>(values: &[f64]) -> Result<Tensor<S>> {
    Tensor::new(values.iter().map(|&v| S::lit(v)).collect(), &[values.len()])
}

fn check_tasks(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape("weighting", format!("state covers {expected} tasks, got {got} losses")));
    }
    Ok(())
}

/// `Σ_k L_k`.
pub fn uniform_loss<S: Scalar>(losses: &[Tensor<S>]) -> Result<Tensor<S>> {
    Ok(stack(losses)?.sum_all())
}

/// `Σ_k λ_k L_k` with `λ` held constant.
pub fn dwa_loss<S: Scalar>(losses: &[Tensor<S>], state: &DwaState) -> Result<Tensor<S>> {
    check_tasks(state.tasks(), losses.len())?;
    let lambda = constant(&state.weights()?)?;
    Ok(stack(losses)?.mul(&lambda)?.sum_all())
}

/// `Σ_k L_k / α_k² + Σ_k log(1 + log α_k²) + |φ − Σ_k |log α_k||`.
pub fn rruw_loss<S: Scalar>(losses: &[Tensor<S>], state: &UncertaintyState<S>) -> Result<Tensor<S>> {
    check_tasks(state.tasks(), losses.len())?;
    let inv_sq = state.log_alpha.scale(S::lit(-2.0)).exp();
    inv_sq.mul(&stack(losses)?)?.sum_all().add(&state.penalty()?)
}

/// `Σ_k (1/α_k² + mix·λ_k) L_k` plus the RRUW penalty terms.
pub fn druw_loss<S: Scalar>(
    losses: &[Tensor<S>],
    uncertainty: &UncertaintyState<S>,
    dwa: &DwaState,
    mix: f64,
) -> Result<Tensor<S>> {
    check_tasks(uncertainty.tasks(), losses.len())?;
    check_tasks(dwa.tasks(), losses.len())?;
    let lambda: Vec<f64> = dwa.weights()?.into_iter().map(|l| mix * l).collect();
    let weights = uncertainty.log_alpha.scale(S::lit(-2.0)).exp().add(&constant(&lambda)?)?;
    weights.mul(&stack(losses)?)?.sum_all().add(&uncertainty.penalty()?)
}

/// Per-run weighting state for one strategy.
#[derive(Debug, Clone)]
pub struct LossWeighting<S: Scalar> {
    strategy: Strategy,
    dwa: DwaState,
    uncertainty: Option<UncertaintyState<S>>,
    mix: f64,
}

impl<S: Scalar> LossWeighting<S> {
    pub fn new(
        strategy: Strategy,
        tasks: usize,
        temperature: f64,
        phi: f64,
        mix: f64,
        store: &mut ParamStore<S>,
    ) -> Result<Self> {
        let uncertainty = if strategy.uses_uncertainty() {
            Some(UncertaintyState::new(store, tasks, phi)?)
        } else {
            None
        };
        Ok(Self { strategy, dwa: DwaState::new(tasks, temperature)?, uncertainty, mix })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn dwa(&self) -> &DwaState {
        &self.dwa
    }

    pub fn dwa_mut(&mut self) -> &mut DwaState {
        &mut self.dwa
    }

    pub fn uncertainty(&self) -> Option<&UncertaintyState<S>> {
        self.uncertainty.as_ref()
    }

    pub fn combine(&self, losses: &[Tensor<S>]) -> Result<Tensor<S>> {
        match (self.strategy, &self.uncertainty) {
            (Strategy::Uniform, _) => uniform_loss(losses),
            (Strategy::Dwa, _) => dwa_loss(losses, &self.dwa),
            (Strategy::Rruw, Some(u)) => rruw_loss(losses, u),
            (Strategy::Druw, Some(u)) => druw_loss(losses, u, &self.dwa, self.mix),
            _ => unreachable!("uncertainty state exists for uncertainty strategies"),
        }
    }

    /// Effective DWA weights for the coming epoch (ones when unused).
    pub fn lambdas(&self) -> Result<Vec<f64>> {
        if self.strategy.uses_dwa() {
            self.dwa.weights()
        } else {
            Ok(vec![1.0; self.dwa.tasks()])
        }
    }

    /// Current `α` (ones when unused).
    pub fn alphas(&self) -> Vec<f64> {
        self.uncertainty.as_ref().map_or_else(|| vec![1.0; self.dwa.tasks()], UncertaintyState::alphas)
    }

    /// Called after each optimizer step.
    pub fn after_step(&self) {
        if let Some(u) = &self.uncertainty {
            u.project();
        }
    }

    pub fn end_epoch(&mut self, mean_losses: &[f64]) -> Result<()> {
        self.dwa.record_epoch(mean_losses)
    }
}
