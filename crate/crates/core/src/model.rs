//! Backbone plus heads, owning the parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, HiddenStack, Masking};
use crate::diffcore::{ParamGroup, ParamStore, Parameter, Tensor};
use crate::error::Result;
use crate::heads::{Architecture, Head, HeadMode, HeadOutput, HeadsConfig, Task, TaskDims};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
    pub dims: TaskDims,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Vanilla,
            backbone: BackboneConfig::default(),
            heads: HeadsConfig::default(),
            dims: TaskDims::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiTaskModel<S: Scalar> {
    config: ModelConfig,
    backbone: Backbone<S>,
    head: Head<S>,
    store: ParamStore<S>,
}

impl<S: Scalar> MultiTaskModel<S> {
    /// Initialises all weights from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, &mut store, rng)?;
        let head = Head::new(
            config.architecture,
            &config.heads,
            config.backbone.d_model,
            config.backbone.n_layers,
            &config.dims,
            &mut store,
            rng,
        )?;
        Ok(Self { config: config.clone(), backbone, head, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone<S> {
        &self.backbone
    }

    pub fn head(&self) -> &Head<S> {
        &self.head
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    /// Moves extra parameters (e.g. the weighting's) into the model's store.
    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn encode<R: Rng>(&self, waves: &Tensor<S>, masking: Masking<'_, R>) -> Result<HiddenStack<S>> {
        self.backbone.encode(waves, masking)
    }

    pub fn forward<R: Rng>(&self, waves: &Tensor<S>, masking: Masking<'_, R>, mode: HeadMode<'_, S>) -> Result<HeadOutput<S>> {
        let stack = self.encode(waves, masking)?;
        self.head.forward(&stack, mode)
    }

    /// Parameters that receive gradient when training on `tasks`: the backbone,
    /// every head parameter belonging to one of `tasks`, and the weighting.
    pub fn trainable_for(&self, tasks: &[Task]) -> Vec<&Parameter<S>> {
        self.store
            .iter()
            .filter(|p| match p.group() {
                ParamGroup::Backbone | ParamGroup::Weighting => true,
                ParamGroup::Head => tasks.iter().any(|t| p.name().starts_with(&format!("head.{t}."))),
            })
            .collect()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.store.count_group(ParamGroup::Head)
    }
}

pub type Model64 = MultiTaskModel<f64>;
pub type Model32 = MultiTaskModel<f32>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::ChainTruth;

    fn off() -> Masking<'static, ChaCha8Rng> {
        Masking::Off
    }

    fn waves(batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..batch * 4000).map(|_| rng.gen_range(-0.5..0.5)).collect(), &[batch, 4000]).unwrap()
    }

    /// Randomises every head parameter; fresh output layers ignore their input.
    fn model(arch: Architecture) -> Model64 {
        let m = MultiTaskModel::new(&ModelConfig { architecture: arch, ..Default::default() }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in m.store().with_prefix("head.") {
            let values: Vec<f64> = (0..p.tensor().numel()).map(|_| rng.gen_range(-0.2..0.2)).collect();
            p.tensor().assign(&values).unwrap();
        }
        m
    }

    #[test]
    fn fresh_outputs_start_at_label_midpoint() {
        let m = Model64::new(&ModelConfig::default(), 0).unwrap();
        let out = m.forward(&waves(2, 1), off(), HeadMode::Eval).unwrap();
        assert!(out.type_logits.to_vec().iter().all(|&v| v == 0.0));
        for t in [&out.two, &out.high, &out.culture] {
            assert!(t.to_vec().iter().all(|&v| v == 0.5));
        }
    }

    fn truth(batch: usize) -> ChainTruth<f64> {
        ChainTruth::from_labels(
            &vec![1; batch],
            8,
            Tensor::full(&[batch, 2], 0.5),
            Tensor::full(&[batch, 10], 0.2),
        )
        .unwrap()
    }

    #[test]
    fn output_shapes_all_architectures() {
        let x = waves(3, 1);
        let t = truth(3);
        for arch in Architecture::ALL {
            let m = model(arch);
            let out = m.forward(&x, off(), HeadMode::Train(Some(&t))).unwrap();
            assert_eq!(out.type_logits.shape(), &[3, 8], "{arch}");
            assert_eq!(out.two.shape(), &[3, 2]);
            assert_eq!(out.high.shape(), &[3, 10]);
            assert_eq!(out.culture.shape(), &[3, 40]);
        }
    }

    #[test]
    fn head_parameter_ordering() {
        let counts: Vec<usize> = Architecture::ALL.iter().map(|&a| model(a).head_parameter_count()).collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn chain_widths() {
        match model(Architecture::Chain).head() {
            Head::Chain(c) => assert_eq!(c.input_widths(), [64, 72, 74, 84]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn chain_training_needs_truth() {
        let m = model(Architecture::Chain);
        assert!(m.forward(&waves(2, 1), off(), HeadMode::Train(None)).is_err());
        let out = m.forward(&waves(2, 1), off(), HeadMode::Eval).unwrap();
        assert_eq!(out.conditioning, Some(crate::heads::ConditioningSource::Prediction));
    }

    #[test]
    fn chain_teacher_forcing_uses_truth() {
        let m = model(Architecture::Chain);
        let x = waves(2, 4);
        let a = m.forward(&x, off(), HeadMode::Train(Some(&truth(2)))).unwrap();
        let mut t = truth(2);
        t.two = Tensor::full(&[2, 2], 0.9);
        let b = m.forward(&x, off(), HeadMode::Train(Some(&t))).unwrap();
        assert_eq!(a.two.to_vec(), b.two.to_vec());
        assert_ne!(a.high.to_vec(), b.high.to_vec());
        assert_eq!(a.conditioning, Some(crate::heads::ConditioningSource::Truth));
    }

    #[test]
    fn zeroing_one_head_leaves_others() {
        for arch in [Architecture::Vanilla, Architecture::Branch] {
            let m = model(arch);
            let x = waves(2, 7);
            let before = m.forward(&x, off(), HeadMode::Eval).unwrap();
            for p in m.store().with_prefix("head.high.") {
                let n = p.tensor().numel();
                p.tensor().assign(&vec![0.0; n]).unwrap();
            }
            let after = m.forward(&x, off(), HeadMode::Eval).unwrap();
            for task in [Task::Type, Task::Two, Task::Culture] {
                assert_eq!(before.get(task).to_vec(), after.get(task).to_vec(), "{arch} {task}");
            }
            assert_ne!(before.high.to_vec(), after.high.to_vec());
        }
    }

    #[test]
    fn branch_attention_rows_sum_to_one() {
        let m = model(Architecture::Branch);
        let out = m.forward(&waves(1, 2), off(), HeadMode::Eval).unwrap();
        assert_eq!(out.attention.len(), 16);
        for probs in &out.attention {
            for row in probs.chunks(31) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn trainable_subset_excludes_other_heads() {
        let m = model(Architecture::Vanilla);
        let subset = m.trainable_for(&[Task::Type]);
        assert!(subset.iter().all(|p| !p.name().starts_with("head.two.")));
        assert!(subset.iter().any(|p| p.name().starts_with("head.type.")));
        assert!(subset.iter().any(|p| p.name().starts_with("backbone.")));
    }

    #[test]
    fn too_many_branch_blocks() {
        let mut cfg = ModelConfig { architecture: Architecture::Branch, ..Default::default() };
        cfg.heads.branch_blocks = 5;
        assert!(Model64::new(&cfg, 0).is_err());
    }
}
