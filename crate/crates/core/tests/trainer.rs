use std::time::Instant;

use burstmtl::checkpoint::Checkpoint;
use burstmtl::config::RunConfig;
use burstmtl::data::{generate_synthetic, Dataset, Split, SynthConfig};
use burstmtl::heads::{Architecture, ConditioningSource, Task};
use burstmtl::trainer::{
    epoch_log, evaluate, load_data, multi_seed, score, train, BatchEvent, Phase, Predictions, Silent, Trainer,
};
use burstmtl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(n: usize, overrides: &[&str]) -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides([format!("data.synth.n={n}").as_str(), "epochs=2", "lr_backbone=1e-3"].into_iter().chain(overrides.iter().copied()))
        .unwrap();
    let data = load_data(&cfg).unwrap();
    (cfg, data)
}

#[test]
fn smoke_two_epochs_on_64_samples() {
    let start = Instant::now();
    let (cfg, data) = small(64, &[]);
    let out = train::<f64>(&cfg, 0, &data, &mut Silent).unwrap();
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    for r in &out.records {
        assert_eq!(r.val.scores.len(), 4);
        assert!(r.train_loss.iter().all(|l| l.is_finite()));
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let (cfg, data) = small(48, &["strategy=druw", "architecture=chain"]);
    let a = train::<f64>(&cfg, 7, &data, &mut Silent).unwrap();
    let b = train::<f64>(&cfg, 7, &data, &mut Silent).unwrap();
    assert_eq!(epoch_log(&a.records), epoch_log(&b.records));
    assert_eq!(a.best_checkpoint, b.best_checkpoint);
    assert_eq!(a.last_checkpoint, b.last_checkpoint);
    let c = train::<f64>(&cfg, 8, &data, &mut Silent).unwrap();
    assert_ne!(epoch_log(&a.records), epoch_log(&c.records));
}

#[test]
fn checkpoint_round_trip_reproduces_validation() {
    let (cfg, data) = small(48, &["architecture=branch", "strategy=rruw"]);
    let out = train::<f64>(&cfg, 1, &data, &mut Silent).unwrap();
    let ckpt = Checkpoint::from_bytes(&out.last_checkpoint).unwrap();
    let metrics = evaluate::<f64>(&ckpt, &data, Split::Val, Some(&cfg.model)).unwrap();
    let last = &out.records.last().unwrap().val;
    for (a, b) in metrics.scores.iter().zip(&last.scores) {
        assert!((a.primary - b.primary).abs() < 1e-10, "{a:?} vs {b:?}");
    }
    assert_eq!(&metrics, last);
    assert!(ckpt.params.contains_key("weighting.log_alpha"));
    assert_eq!(ckpt.header.epoch, 2);
}

#[test]
fn checkpoint_rejects_other_architecture() {
    let (cfg, data) = small(32, &["epochs=1"]);
    let out = train::<f64>(&cfg, 1, &data, &mut Silent).unwrap();
    let ckpt = Checkpoint::from_bytes(&out.best_checkpoint).unwrap();
    let mut other = cfg.model.clone();
    other.architecture = Architecture::Chain;
    assert!(matches!(evaluate::<f64>(&ckpt, &data, Split::Val, Some(&other)), Err(Error::Checkpoint(_))));
    let mut bytes = out.best_checkpoint.clone();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn oracle_predictions_score_perfectly() {
    let data = generate_synthetic(&SynthConfig { n: 200, sample_len: 64, ..Default::default() }).unwrap();
    let val = data.split(Split::Val);
    let m = score(&Predictions::oracle(&val, &data.dims), &val, &data.dims, &Task::ALL).unwrap();
    for s in &m.scores {
        assert!((s.primary - 1.0).abs() < 1e-12, "{s:?}");
    }
}

#[test]
fn chance_predictions_score_near_one_eighth() {
    let data = generate_synthetic(&SynthConfig { n: 2000, sample_len: 16, ..Default::default() }).unwrap();
    let all: Vec<_> = data.samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = Predictions::oracle(&all, &data.dims);
    p.type_logits.iter_mut().for_each(|v| *v = rng.gen());
    let m = score(&p, &all, &data.dims, &[Task::Type]).unwrap();
    assert!((m.scores[0].primary - 0.125).abs() < 0.03, "{}", m.scores[0].primary);
}

#[test]
fn single_task_training_uses_only_that_loss() {
    let (cfg, data) = small(32, &["epochs=1", "tasks=[\"high\"]"]);
    let out = train::<f64>(&cfg, 0, &data, &mut Silent).unwrap();
    let r = &out.records[0];
    assert_eq!(r.tasks, vec![Task::High]);
    assert_eq!(r.val.scores.len(), 1);
    assert_eq!(r.lambdas, vec![1.0]);
}

#[test]
fn non_finite_input_aborts_naming_a_task() {
    let (cfg, mut data) = small(32, &["epochs=1"]);
    for s in data.samples.iter_mut().filter(|s| s.split == Split::Train) {
        s.wave[10] = f32::NAN;
    }
    match train::<f64>(&cfg, 0, &data, &mut Silent) {
        Err(Error::NonFiniteLoss { task, epoch, batch }) => {
            assert_eq!(task, "type");
            assert_eq!((epoch, batch), (1, 0));
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.records.len())),
    }
}

#[test]
fn empty_validation_split_is_a_config_error() {
    let (cfg, mut data) = small(32, &["epochs=1"]);
    data.samples.iter_mut().for_each(|s| s.split = Split::Train);
    assert!(matches!(train::<f64>(&cfg, 0, &data, &mut Silent), Err(Error::Config(_))));
}

#[derive(Default)]
struct Recorder(Vec<BatchEvent>);

impl burstmtl::trainer::Observer for Recorder {
    fn batch(&mut self, e: &BatchEvent) {
        self.0.push(e.clone());
    }
}

#[test]
fn chain_conditioning_and_masking_follow_phase() {
    let (cfg, data) = small(40, &["architecture=chain", "epochs=1"]);
    let mut rec = Recorder::default();
    train::<f64>(&cfg, 0, &data, &mut rec).unwrap();
    let train_events: Vec<_> = rec.0.iter().filter(|e| e.phase == Phase::Train).collect();
    let eval_events: Vec<_> = rec.0.iter().filter(|e| e.phase == Phase::Eval).collect();
    assert!(!train_events.is_empty() && !eval_events.is_empty());
    assert!(train_events.iter().all(|e| e.conditioning == Some(ConditioningSource::Truth) && e.masked));
    assert!(eval_events.iter().all(|e| e.conditioning == Some(ConditioningSource::Prediction) && !e.masked));
}

#[test]
fn multi_seed_report() {
    let (mut cfg, data) = small(32, &["epochs=1"]);
    cfg.train.seeds = vec![4];
    let (one, _) = multi_seed::<f64>(&cfg, &data, None, &mut Silent).unwrap();
    let single = train::<f64>(&cfg, 4, &data, &mut Silent).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(one.rows[0].metrics, single.best_metrics);
    assert_eq!(one.best, single.best_metrics);

    cfg.train.seeds = vec![1, 2, 3];
    let dir = tempfile::tempdir().unwrap();
    let (three, dirs) = multi_seed::<f64>(&cfg, &data, Some(dir.path()), &mut Silent).unwrap();
    assert_eq!(three.rows.len(), 3);
    assert_eq!(dirs.len(), 3);
    for task in Task::ALL {
        let max = three.rows.iter().map(|r| r.metrics.get(task).unwrap().primary).fold(f64::MIN, f64::max);
        assert_eq!(three.best.get(task).unwrap().primary, max);
    }
    assert!(three.rows.windows(2).any(|w| w[0].metrics != w[1].metrics));
    for d in &dirs {
        for f in ["epochs.csv", "weights.csv", "best.ckpt", "last.ckpt", "report.json", "config.resolved"] {
            assert!(d.join(f).exists(), "{f}");
        }
    }
}

#[test]
fn scripted_monitor_halves_rates_once() {
    let cfg = RunConfig::default();
    let mut t = Trainer::<f64>::new(&cfg, 0).unwrap();
    let before = t.rates();
    let fired: Vec<bool> = (0..6).map(|_| t.schedule(0.42)).collect();
    assert_eq!(fired.iter().filter(|&&f| f).count(), 1);
    assert!(fired[5]);
    let after = t.rates();
    assert_eq!(after.backbone, before.backbone * 0.5);
    assert_eq!(after.head, before.head * 0.5);
}

#[test]
fn f32_training_runs() {
    let (cfg, data) = small(32, &["epochs=1", "strategy=dwa"]);
    let out = train::<f32>(&cfg, 0, &data, &mut Silent).unwrap();
    assert_eq!(out.records.len(), 1);
}
