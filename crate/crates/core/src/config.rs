//! Run configuration: TOML sections per module plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::diffcore::AdamWConfig;
use crate::error::{Error, Result};
use crate::heads::Task;
use crate::model::ModelConfig;
use crate::weighting::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seeds: Vec<u64>,
    /// Tasks whose losses are optimised and whose metrics are monitored.
    pub tasks: Vec<Task>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            eval_batch_size: 64,
            lr_backbone: 1e-5,
            lr_heads: 1e-3,
            plateau_patience: 5,
            plateau_factor: 0.5,
            seeds: vec![0],
            tasks: Task::ALL.to_vec(),
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    pub strategy: Strategy,
    /// DWA softmax temperature.
    pub temperature: f64,
    /// Target for `Σ|log α|`.
    pub phi: f64,
    /// Scale of the DWA term in DRUW.
    pub mix: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Uniform, temperature: 2.0, phi: 1.0, mix: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// When unset, a corpus is generated in memory from `synth`.
    pub manifest: Option<PathBuf>,
    pub signals: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub weighting: WeightingConfig,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if t.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if t.batch_size < 2 || t.eval_batch_size == 0 {
            return bad("batch_size must be at least 2 and eval_batch_size positive");
        }
        if !(t.lr_backbone > 0.0 && t.lr_heads > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if t.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1");
        }
        if t.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if t.tasks.is_empty() {
            return bad("at least one task must be enabled");
        }
        let mut sorted = t.tasks.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != t.tasks.len() {
            return bad("tasks must not repeat");
        }
        let w = &self.weighting;
        if !(w.temperature > 0.0) || !(w.phi >= 0.0) || !(w.mix >= 0.0) {
            return bad("temperature must be positive, phi and mix non-negative");
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("optimizer betas must lie in [0,1), eps > 0, weight_decay ≥ 0");
        }
        self.model.backbone.validate()?;
        if self.data.manifest.is_some() != self.data.signals.is_some() {
            return bad("data.manifest and data.signals must be given together");
        }
        if self.data.manifest.is_none() {
            if self.data.synth.dims() != self.model.dims {
                return bad("data.synth label sizes differ from model.dims");
            }
            if self.data.synth.sample_len != self.model.backbone.input_len {
                return bad("data.synth.sample_len differs from model.backbone.input_len");
            }
        }
        Ok(())
    }

    /// Applies `key=value`. A key is either a dotted path (`train.epochs`)
    /// or a leaf name that occurs exactly once (`epochs`). Values are TOML
    /// literals; bare words are taken as strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        self.apply_overrides([assignment])
    }

    /// Applies all assignments, then validates once; on error `self` is unchanged.
    pub fn apply_overrides<'a>(&mut self, assignments: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut next = self.clone();
        for a in assignments {
            next = next.with_assignment(a)?;
        }
        next.validate()?;
        *self = next;
        Ok(())
    }

    fn with_assignment(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut tree = toml::Value::try_from(self).expect("run config serialises");
        let path = resolve_key(&tree, key)?;
        let mut slot = &mut tree;
        for part in &path {
            let table = slot.as_table_mut().expect("paths run through tables");
            slot = table.entry(part.clone()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *slot = value;
        tree.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Every dotted path to a settable value. Optional keys that are unset do
/// not appear in the serialised tree, so the known optional paths are added.
fn all_paths(v: &toml::Value, prefix: &[String], out: &mut Vec<Vec<String>>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let mut p = prefix.to_vec();
            p.push(k.clone());
            match child {
                toml::Value::Table(_) => all_paths(child, &p, out),
                _ => out.push(p),
            }
        }
    }
}

fn resolve_key(tree: &toml::Value, key: &str) -> Result<Vec<String>> {
    let mut paths = Vec::new();
    all_paths(tree, &[], &mut paths);
    for optional in [["data", "manifest"], ["data", "signals"]] {
        let p: Vec<String> = optional.iter().map(|s| s.to_string()).collect();
        if !paths.contains(&p) {
            paths.push(p);
        }
    }
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    let hits: Vec<&Vec<String>> = if parts.len() > 1 {
        paths.iter().filter(|p| **p == parts).collect()
    } else {
        paths.iter().filter(|p| p.last() == Some(&parts[0])).collect()
    };
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(Error::UnknownKey(key.to_string())),
        many => Err(Error::Config(format!(
            "key `{key}` is ambiguous: {}",
            many.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::Architecture;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.lr_backbone, 1e-5);
        assert_eq!(cfg.train.lr_heads, 1e-3);
    }

    #[test]
    fn overrides_by_leaf_and_path() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(["architecture=chain", "strategy=dwa", "train.epochs=3", "lr_heads=0.01"]).unwrap();
        assert_eq!(cfg.model.architecture, Architecture::Chain);
        assert_eq!(cfg.weighting.strategy, Strategy::Dwa);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_heads, 0.01);
        cfg.apply_override("seeds=[1, 2, 3]").unwrap();
        assert_eq!(cfg.train.seeds, vec![1, 2, 3]);
        assert!(cfg.apply_override("manifest=/tmp/m.csv").is_err());
        cfg.apply_overrides(["manifest=/tmp/m.csv", "signals=/tmp/s.bin"]).unwrap();
        assert_eq!(cfg.data.manifest, Some(PathBuf::from("/tmp/m.csv")));
    }

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = RunConfig::default();
        match cfg.apply_override("foo=1") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "foo"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(cfg.apply_override("train.nope=1"), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("plateau_factor=1.5").is_err());
        assert!(cfg.apply_override("epochs=0").is_err());
        assert!(cfg.apply_override("strategy=best").is_err());
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_toml_field_rejected() {
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
    }
}
