//! Training loop, validation, plateau scheduling, checkpoints and
//! multi-seed runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Masking;
use crate::checkpoint::{Checkpoint, Snapshot};
use crate::config::RunConfig;
use crate::data::{culture_masked_loss, generate_synthetic, Dataset, Sample, Split};
use crate::diffcore::{no_grad, GroupRates, OptimizerState, Tensor};
use crate::error::{Error, Result};
use crate::heads::{ChainTruth, ConditioningSource, HeadMode, HeadOutput, Task, TaskDims};
use crate::metrics::{argmax_rows, ccc_loss, cross_entropy, mean_ccc, mean_pearson, uar};
use crate::model::MultiTaskModel;
use crate::scalar::Scalar;
use crate::weighting::LossWeighting;

/// Halves (by `factor`) the learning rates when the monitor has not
/// improved for `patience` consecutive epochs, then starts counting again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self { patience, factor, best: None, bad_epochs: 0, reductions: 0 }
    }

    /// Returns whether the rates should be scaled now.
    pub fn observe(&mut self, monitor: f64) -> bool {
        if self.best.map_or(true, |b| monitor > b) {
            self.best = Some(monitor);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.reductions += 1;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchEvent {
    pub phase: Phase,
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub conditioning: Option<ConditioningSource>,
    pub masked: bool,
}

/// Hooks into the loop; every method defaults to doing nothing.
pub trait Observer {
    fn batch(&mut self, _event: &BatchEvent) {}
    fn epoch(&mut self, _record: &EpochRecord) {}
}

pub struct Silent;

impl Observer for Silent {}

/// Validation score of one task: UAR for type, mean CCC otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    pub primary: f64,
    /// Mean Pearson correlation for regression tasks, when defined.
    pub rho: Option<f64>,
}

impl TaskScore {
    pub fn metric_name(&self) -> &'static str {
        match self.task {
            Task::Type => "UAR",
            _ => "CCC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scores: Vec<TaskScore>,
}

impl Metrics {
    pub fn get(&self, task: Task) -> Option<&TaskScore> {
        self.scores.iter().find(|s| s.task == task)
    }

    /// Unweighted mean of the per-task primary metrics.
    pub fn monitor(&self) -> f64 {
        self.scores.iter().map(|s| s.primary).sum::<f64>() / self.scores.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub tasks: Vec<Task>,
    pub train_loss: Vec<f64>,
    pub val: Metrics,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// DWA weights used during the epoch.
    pub lambdas: Vec<f64>,
    /// `α` at the end of the epoch.
    pub alphas: Vec<f64>,
    pub monitor: f64,
    pub lr_reduced: bool,
}

/// Model outputs for a list of samples, row-major, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub type_logits: Vec<f64>,
    pub two: Vec<f64>,
    pub high: Vec<f64>,
    pub culture: Vec<f64>,
}

impl Predictions {
    /// Outputs that reproduce the labels exactly.
    pub fn oracle(samples: &[&Sample], dims: &TaskDims) -> Self {
        let mut p = Predictions { type_logits: Vec::new(), two: Vec::new(), high: Vec::new(), culture: Vec::new() };
        for s in samples {
            p.type_logits.extend((0..dims.type_classes).map(|c| if c == s.type_label { 1.0 } else { 0.0 }));
            p.two.extend(s.two);
            p.high.extend(&s.high);
            p.culture.extend(s.culture_targets(dims.cultures).0);
        }
        p
    }
}

fn optional_rho(result: Result<f64>) -> Option<f64> {
    match result {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("correlation undefined: {e}");
            None
        }
    }
}

/// Scores predictions against the labels of `samples`. The culture score
/// is the mean over cultures (with at least two samples) of the mean CCC
/// of each sample's own block.
pub fn score(preds: &Predictions, samples: &[&Sample], dims: &TaskDims, tasks: &[Task]) -> Result<Metrics> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!("cannot score {n} samples; at least two are needed")));
    }
    let mut scores = Vec::new();
    for &task in tasks {
        let s = match task {
            Task::Type => {
                let truth: Vec<usize> = samples.iter().map(|s| s.type_label).collect();
                let pred = argmax_rows(&preds.type_logits, dims.type_classes);
                TaskScore { task, primary: uar(&truth, &pred, dims.type_classes)?, rho: None }
            }
            Task::Two => {
                let target: Vec<f64> = samples.iter().flat_map(|s| s.two).collect();
                TaskScore {
                    task,
                    primary: mean_ccc(&preds.two, &target, 2)?,
                    rho: optional_rho(mean_pearson(&preds.two, &target, 2)),
                }
            }
            Task::High => {
                let target: Vec<f64> = samples.iter().flat_map(|s| s.high.iter().copied()).collect();
                TaskScore {
                    task,
                    primary: mean_ccc(&preds.high, &target, dims.emotions)?,
                    rho: optional_rho(mean_pearson(&preds.high, &target, dims.emotions)),
                }
            }
            Task::Culture => culture_score(preds, samples, dims)?,
        };
        scores.push(s);
    }
    Ok(Metrics { scores })
}

fn culture_score(preds: &Predictions, samples: &[&Sample], dims: &TaskDims) -> Result<TaskScore> {
    let e = dims.emotions;
    let width = e * dims.cultures;
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let g = groups.entry(s.culture).or_default();
        let block = &preds.culture[i * width + s.culture * e..i * width + (s.culture + 1) * e];
        g.0.extend_from_slice(block);
        g.1.extend_from_slice(&s.high);
    }
    let usable: Vec<&(Vec<f64>, Vec<f64>)> = groups.values().filter(|(p, _)| p.len() >= 2 * e).collect();
    if usable.is_empty() {
        return Err(Error::Config("no culture has two samples in this split".into()));
    }
    let mut ccc_sum = 0.0;
    let mut rhos = Vec::new();
    for (p, t) in &usable {
        ccc_sum += mean_ccc(p, t, e)?;
        if let Some(r) = optional_rho(mean_pearson(p, t, e)) {
            rhos.push(r);
        }
    }
    let rho = (rhos.len() == usable.len()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64);
    Ok(TaskScore { task: Task::Culture, primary: ccc_sum / usable.len() as f64, rho })
}

struct Batch<S: Scalar> {
    waves: Tensor<S>,
    types: Vec<usize>,
    two: Tensor<S>,
    high: Tensor<S>,
    culture: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    fn new(samples: &[&Sample]) -> Result<Self> {
        let n = samples.len();
        let len = samples[0].wave.len();
        let e = samples[0].high.len();
        let waves = samples.iter().flat_map(|s| s.wave.iter().map(|&v| S::lit(v as f64))).collect();
        let two = samples.iter().flat_map(|s| s.two.iter().map(|&v| S::lit(v))).collect();
        let high = samples.iter().flat_map(|s| s.high.iter().map(|&v| S::lit(v))).collect();
        Ok(Self {
            waves: Tensor::new(waves, &[n, len])?,
            types: samples.iter().map(|s| s.type_label).collect(),
            two: Tensor::new(two, &[n, 2])?,
            high: Tensor::new(high, &[n, e])?,
            culture: samples.iter().map(|s| s.culture).collect(),
        })
    }

    fn truth(&self, classes: usize) -> Result<ChainTruth<S>> {
        ChainTruth::from_labels(&self.types, classes, self.two.clone(), self.high.clone())
    }

    fn loss(&self, task: Task, out: &HeadOutput<S>) -> Result<Tensor<S>> {
        match task {
            Task::Type => cross_entropy(&out.type_logits, &self.types),
            Task::Two => ccc_loss(&out.two, &self.two),
            Task::High => ccc_loss(&out.high, &self.high),
            Task::Culture => culture_masked_loss(&out.culture, &self.high, &self.culture),
        }
    }
}

/// Builds the dataset a configuration points at.
pub fn load_data(config: &RunConfig) -> Result<Dataset> {
    match (&config.data.manifest, &config.data.signals) {
        (Some(m), Some(s)) => Dataset::load(m, s, config.model.dims, config.model.backbone.input_len),
        _ => generate_synthetic(&config.data.synth),
    }
}

/// One seeded training run.
pub struct Trainer<S: Scalar> {
    config: RunConfig,
    seed: u64,
    model: MultiTaskModel<S>,
    weighting: LossWeighting<S>,
    optimizer: OptimizerState,
    plateau: Plateau,
    rng: ChaCha8Rng,
    epoch: usize,
    last_monitor: f64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = MultiTaskModel::new(&config.model, seed)?;
        let w = &config.weighting;
        let weighting =
            LossWeighting::new(w.strategy, config.train.tasks.len(), w.temperature, w.phi, w.mix, model.store_mut())?;
        let t = &config.train;
        let rates = GroupRates { backbone: t.lr_backbone, head: t.lr_heads, weighting: t.lr_heads };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            seed,
            model,
            weighting,
            optimizer: OptimizerState::new(config.optimizer, rates),
            plateau: Plateau::new(t.plateau_patience, t.plateau_factor),
            rng,
            epoch: 0,
            last_monitor: f64::NAN,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &MultiTaskModel<S> {
        &self.model
    }

    pub fn weighting(&self) -> &LossWeighting<S> {
        &self.weighting
    }

    pub fn rates(&self) -> GroupRates {
        self.optimizer.rates
    }

    pub fn plateau(&self) -> &Plateau {
        &self.plateau
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Feeds one epoch's monitor to the scheduler, scaling all rates when
    /// it fires.
    pub fn schedule(&mut self, monitor: f64) -> bool {
        let fire = self.plateau.observe(monitor);
        if fire {
            self.optimizer.rates.scale(self.plateau.factor);
        }
        fire
    }

    /// Trains one epoch over the train split, then validates.
    pub fn run_epoch(&mut self, data: &Dataset, observer: &mut dyn Observer) -> Result<EpochRecord> {
        let train = data.split(Split::Train);
        let val = data.split(Split::Val);
        if train.len() < 2 || val.len() < 2 {
            return Err(Error::Config(format!(
                "train and val splits need at least two samples (have {} and {})",
                train.len(),
                val.len()
            )));
        }
        self.epoch += 1;
        let tasks = self.config.train.tasks.clone();
        let lambdas = self.weighting.lambdas()?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = vec![0.0; tasks.len()];
        let mut batches = 0usize;
        let prob = self.config.model.backbone.mask_prob;
        for (b, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let samples: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let batch = Batch::<S>::new(&samples)?;
            let truth = batch.truth(data.dims.type_classes)?;
            let stack = self.model.encode(&batch.waves, Masking::On { prob, rng: &mut self.rng })?;
            let out = self.model.head().forward(&stack, HeadMode::Train(Some(&truth)))?;
            observer.batch(&BatchEvent {
                phase: Phase::Train,
                epoch: self.epoch,
                batch: b,
                size: samples.len(),
                conditioning: out.conditioning,
                masked: stack.masked,
            });
            let mut losses = Vec::with_capacity(tasks.len());
            for (k, &task) in tasks.iter().enumerate() {
                let l = batch.loss(task, &out)?;
                let v = l.item().to_f64_lossy();
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { task: task.to_string(), epoch: self.epoch, batch: b });
                }
                sums[k] += v;
                losses.push(l);
            }
            let total = self.weighting.combine(&losses)?;
            if !total.item().to_f64_lossy().is_finite() {
                return Err(Error::NonFiniteLoss { task: "combined".into(), epoch: self.epoch, batch: b });
            }
            total.backward()?;
            let params = self.model.trainable_for(&tasks);
            self.optimizer.step(&params)?;
            self.weighting.after_step();
            batches += 1;
        }
        let train_loss: Vec<f64> = sums.iter().map(|s| s / batches.max(1) as f64).collect();
        self.weighting.end_epoch(&train_loss)?;
        let lr = self.optimizer.rates;
        let val_metrics = self.evaluate(&val, self.epoch, observer)?;
        let monitor = val_metrics.monitor();
        self.last_monitor = monitor;
        let lr_reduced = self.schedule(monitor);
        let record = EpochRecord {
            epoch: self.epoch,
            tasks,
            train_loss,
            val: val_metrics,
            lr_backbone: lr.backbone,
            lr_heads: lr.head,
            lambdas,
            alphas: self.weighting.alphas(),
            monitor,
            lr_reduced,
        };
        observer.epoch(&record);
        Ok(record)
    }

    pub fn predict(&self, samples: &[&Sample], epoch: usize, observer: &mut dyn Observer) -> Result<Predictions> {
        predict(&self.model, samples, self.config.train.eval_batch_size, epoch, observer)
    }

    pub fn evaluate(&self, samples: &[&Sample], epoch: usize, observer: &mut dyn Observer) -> Result<Metrics> {
        let preds = self.predict(samples, epoch, observer)?;
        score(&preds, samples, &self.config.model.dims, &self.config.train.tasks)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        Snapshot {
            config: &self.config,
            seed: self.seed,
            epoch: self.epoch,
            monitor: self.last_monitor,
            model: &self.model,
            optimizer: &self.optimizer,
            dwa: self.weighting.dwa(),
            plateau: &self.plateau,
        }
        .to_bytes()
    }
}

/// Forward pass without masking, chain in evaluation mode, no gradients.
pub fn predict<S: Scalar>(
    model: &MultiTaskModel<S>,
    samples: &[&Sample],
    batch_size: usize,
    epoch: usize,
    observer: &mut dyn Observer,
) -> Result<Predictions> {
    let mut p = Predictions { type_logits: Vec::new(), two: Vec::new(), high: Vec::new(), culture: Vec::new() };
    let collect = |t: &Tensor<S>, dst: &mut Vec<f64>| dst.extend(t.data().iter().map(|v| v.to_f64_lossy()));
    no_grad(|| -> Result<()> {
        for (b, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
            let batch = Batch::<S>::new(chunk)?;
            let stack = model.encode(&batch.waves, Masking::<ChaCha8Rng>::Off)?;
            let out = model.head().forward(&stack, HeadMode::Eval)?;
            observer.batch(&BatchEvent {
                phase: Phase::Eval,
                epoch,
                batch: b,
                size: chunk.len(),
                conditioning: out.conditioning,
                masked: stack.masked,
            });
            collect(&out.type_logits, &mut p.type_logits);
            collect(&out.two, &mut p.two);
            collect(&out.high, &mut p.high);
            collect(&out.culture, &mut p.culture);
        }
        Ok(())
    })?;
    Ok(p)
}

/// Result of one seeded run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metrics: Metrics,
    pub best_checkpoint: Vec<u8>,
    pub last_checkpoint: Vec<u8>,
}

pub fn train<S: Scalar>(config: &RunConfig, seed: u64, data: &Dataset, observer: &mut dyn Observer) -> Result<RunOutcome> {
    let mut trainer = Trainer::<S>::new(config, seed)?;
    let mut records = Vec::new();
    let mut best: Option<(usize, Metrics, Vec<u8>)> = None;
    for _ in 0..config.train.epochs {
        let rec = trainer.run_epoch(data, observer)?;
        log::info!("seed {seed} epoch {}: monitor {:.4}", rec.epoch, rec.monitor);
        if best.as_ref().map_or(true, |(_, m, _)| rec.monitor > m.monitor()) {
            best = Some((rec.epoch, rec.val.clone(), trainer.checkpoint_bytes()?));
        }
        records.push(rec);
    }
    let last_checkpoint = trainer.checkpoint_bytes()?;
    let (best_epoch, best_metrics, best_checkpoint) = match best {
        Some(b) => b,
        None => (records.len(), records.last().expect("epochs ≥ 1").val.clone(), last_checkpoint.clone()),
    };
    Ok(RunOutcome { seed, records, best_epoch, best_metrics, best_checkpoint, last_checkpoint })
}

/// Scores a stored checkpoint on one split of `data`.
pub fn evaluate<S: Scalar>(
    checkpoint: &Checkpoint,
    data: &Dataset,
    split: Split,
    expected: Option<&crate::model::ModelConfig>,
) -> Result<Metrics> {
    let model = checkpoint.model::<S>(expected)?;
    let samples = data.split(split);
    if samples.len() < 2 {
        return Err(Error::Config(format!("split `{split}` has fewer than two samples")));
    }
    let cfg = &checkpoint.header.config;
    let preds = predict(&model, &samples, cfg.train.eval_batch_size, checkpoint.header.epoch, &mut Silent)?;
    score(&preds, &samples, &cfg.model.dims, &cfg.train.tasks)
}

pub const EPOCH_LOG_HEADER: &str = "epoch,task,train_loss,val_metric,lr_backbone,lr_heads,lambda,alpha";
pub const WEIGHT_TRACE_HEADER: &str = "epoch,strategy,task,lambda,alpha";

pub fn epoch_log(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in records {
        for (k, task) in r.tasks.iter().enumerate() {
            let metric = r.val.get(*task).map_or(f64::NAN, |s| s.primary);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, task, r.train_loss[k], metric, r.lr_backbone, r.lr_heads, r.lambdas[k], r.alphas[k]
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub epoch: usize,
    pub task: String,
    pub lambda: f64,
    pub alpha: f64,
}

/// Reads the `epoch`, `task`, `lambda` and `alpha` columns of an epoch log.
pub fn read_epoch_log(path: &Path) -> Result<Vec<WeightRow>> {
    let fmt = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != EPOCH_LOG_HEADER {
        return Err(fmt(format!("unexpected header {}", header.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c).and_then(|v| v.parse().ok()).ok_or_else(|| fmt(format!("row {}: bad {}", i + 2, header[c])))
        };
        rows.push(WeightRow {
            epoch: num(0)? as usize,
            task: rec.get(1).unwrap_or_default().to_string(),
            lambda: num(6)?,
            alpha: num(7)?,
        });
    }
    Ok(rows)
}

pub fn weight_trace(rows: &[WeightRow], strategy: &str) -> String {
    let mut out = String::from(WEIGHT_TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, strategy, r.task, r.lambda, r.alpha));
    }
    out
}

pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const WEIGHT_TRACE_FILE: &str = "weights.csv";
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";
pub const LAST_CHECKPOINT_FILE: &str = "last.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

/// Writes a run's logs, checkpoints and report into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), config.to_toml())?;
    fs::write(dir.join(EPOCH_LOG_FILE), epoch_log(&outcome.records))?;
    let rows: Vec<WeightRow> = outcome
        .records
        .iter()
        .flat_map(|r| {
            r.tasks.iter().enumerate().map(move |(k, t)| WeightRow {
                epoch: r.epoch,
                task: t.to_string(),
                lambda: r.lambdas[k],
                alpha: r.alphas[k],
            })
        })
        .collect();
    fs::write(dir.join(WEIGHT_TRACE_FILE), weight_trace(&rows, config.weighting.strategy.name()))?;
    fs::write(dir.join(BEST_CHECKPOINT_FILE), &outcome.best_checkpoint)?;
    fs::write(dir.join(LAST_CHECKPOINT_FILE), &outcome.last_checkpoint)?;
    let report = SeedRow::from(outcome);
    let mut f = fs::File::create(dir.join(REPORT_FILE))?;
    f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub best_epoch: usize,
    pub monitor: f64,
    pub metrics: Metrics,
}

impl From<&RunOutcome> for SeedRow {
    fn from(o: &RunOutcome) -> Self {
        SeedRow { seed: o.seed, best_epoch: o.best_epoch, monitor: o.best_metrics.monitor(), metrics: o.best_metrics.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub rows: Vec<SeedRow>,
    /// Per-task maxima over seeds.
    pub best: Metrics,
}

impl MultiSeedReport {
    pub fn from_rows(rows: Vec<SeedRow>) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Config("no seeds were run".into()))?;
        let scores = first
            .metrics
            .scores
            .iter()
            .map(|s| {
                let each = rows.iter().filter_map(|r| r.metrics.get(s.task));
                TaskScore {
                    task: s.task,
                    primary: each.clone().map(|x| x.primary).fold(f64::NEG_INFINITY, f64::max),
                    rho: each.filter_map(|x| x.rho).reduce(f64::max),
                }
            })
            .collect();
        Ok(Self { rows, best: Metrics { scores } })
    }
}

/// Runs every configured seed in turn. With `out`, each run is written to
/// `out/seed-<seed>/`.
pub fn multi_seed<S: Scalar>(
    config: &RunConfig,
    data: &Dataset,
    out: Option<&Path>,
    observer: &mut dyn Observer,
) -> Result<(MultiSeedReport, Vec<PathBuf>)> {
    let mut rows = Vec::new();
    let mut dirs = Vec::new();
    for &seed in &config.train.seeds {
        let outcome = train::<S>(config, seed, data, observer)?;
        if let Some(root) = out {
            let dir = root.join(format!("seed-{seed}"));
            write_run(&dir, config, &outcome)?;
            dirs.push(dir);
        }
        rows.push(SeedRow::from(&outcome));
    }
    Ok((MultiSeedReport::from_rows(rows)?, dirs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_flat_sequence_fires_once_at_sixth_epoch() {
        let mut p = Plateau::new(5, 0.5);
        let fired: Vec<bool> = (0..6).map(|_| p.observe(0.3)).collect();
        assert_eq!(fired, vec![false, false, false, false, false, true]);
        assert_eq!(p.reductions, 1);
        let later: Vec<bool> = (0..4).map(|_| p.observe(0.3)).collect();
        assert!(later.iter().all(|f| !f));
    }

    #[test]
    fn plateau_resets_on_improvement() {
        let mut p = Plateau::new(2, 0.5);
        assert!(!p.observe(0.1));
        assert!(!p.observe(0.1));
        assert!(!p.observe(0.2));
        assert!(!p.observe(0.2));
        assert!(p.observe(0.2));
        assert!(!p.observe(f64::NAN));
    }

    #[test]
    fn report_best_is_per_task_maximum() {
        let row = |seed, a, b| SeedRow {
            seed,
            best_epoch: 1,
            monitor: 0.0,
            metrics: Metrics {
                scores: vec![
                    TaskScore { task: Task::Type, primary: a, rho: None },
                    TaskScore { task: Task::High, primary: b, rho: Some(b) },
                ],
            },
        };
        let r = MultiSeedReport::from_rows(vec![row(0, 0.5, 0.2), row(1, 0.4, 0.6), row(2, 0.45, 0.1)]).unwrap();
        assert_eq!(r.best.get(Task::Type).unwrap().primary, 0.5);
        assert_eq!(r.best.get(Task::High).unwrap().primary, 0.6);
        assert_eq!(r.best.get(Task::High).unwrap().rho, Some(0.6));
    }
}
