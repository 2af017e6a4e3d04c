//! Task heads over a [`HiddenStack`]: parallel networks (VANILLA), a
//! teacher-forced classifier chain (CHAIN), and per-task attention stacks
//! over successive backbone layers (BRANCH).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::HiddenStack;
use crate::diffcore::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, MultiHeadAttention, TwoLayer};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Type,
    Two,
    High,
    Culture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

impl Task {
    /// Also the chain order.
    pub const ALL: [Task; 4] = [Task::Type, Task::Two, Task::High, Task::Culture];

    pub fn name(self) -> &'static str {
        match self {
            Task::Type => "type",
            Task::Two => "two",
            Task::High => "high",
            Task::Culture => "culture",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Type => TaskKind::Classification,
            _ => TaskKind::Regression,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Label-space sizes the heads are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDims {
    pub type_classes: usize,
    pub emotions: usize,
    pub cultures: usize,
}

impl Default for TaskDims {
    fn default() -> Self {
        Self { type_classes: 8, emotions: 10, cultures: 4 }
    }
}

impl TaskDims {
    pub fn out_dim(&self, task: Task) -> usize {
        match task {
            Task::Type => self.type_classes,
            Task::Two => 2,
            Task::High => self.emotions,
            Task::Culture => self.emotions * self.cultures,
        }
    }

    pub fn spec(&self, task: Task) -> TaskSpec {
        TaskSpec { task, out_dim: self.out_dim(task), kind: task.kind() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub task: Task,
    pub out_dim: usize,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Vanilla,
    Chain,
    Branch,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Vanilla, Architecture::Chain, Architecture::Branch];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Vanilla => "vanilla",
            Architecture::Chain => "chain",
            Architecture::Branch => "branch",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    /// Width of each task network's hidden layer.
    pub hidden: usize,
    /// Attention blocks per task in BRANCH.
    pub branch_blocks: usize,
    /// Heads per attention block in BRANCH.
    pub branch_heads: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { hidden: 256, branch_blocks: 4, branch_heads: 4 }
    }
}

/// Where the chain took its conditioning vectors from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningSource {
    Truth,
    Prediction,
}

#[derive(Debug, Clone)]
pub struct HeadOutput<S: Scalar> {
    pub type_logits: Tensor<S>,
    pub two: Tensor<S>,
    pub high: Tensor<S>,
    pub culture: Tensor<S>,
    /// Set by CHAIN only.
    pub conditioning: Option<ConditioningSource>,
    /// BRANCH attention maps, task-major then block, each `[batch][head][tq][tk]`.
    pub attention: Vec<Vec<S>>,
}

impl<S: Scalar> HeadOutput<S> {
    pub fn get(&self, task: Task) -> &Tensor<S> {
        match task {
            Task::Type => &self.type_logits,
            Task::Two => &self.two,
            Task::High => &self.high,
            Task::Culture => &self.culture,
        }
    }
}

/// Ground-truth conditioning vectors fed to the chain during training.
#[derive(Debug, Clone)]
pub struct ChainTruth<S: Scalar> {
    /// `(batch, type_classes)`: one-hot labels.
    pub type_cond: Tensor<S>,
    pub two: Tensor<S>,
    pub high: Tensor<S>,
}

impl<S: Scalar> ChainTruth<S> {
    pub fn from_labels(type_labels: &[usize], classes: usize, two: Tensor<S>, high: Tensor<S>) -> Result<Self> {
        let mut onehot = vec![S::zero(); type_labels.len() * classes];
        for (i, &l) in type_labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::domain("chain truth", format!("label {l} outside {classes} classes")));
            }
            onehot[i * classes + l] = S::one();
        }
        Ok(Self { type_cond: Tensor::new(onehot, &[type_labels.len(), classes])?, two, high })
    }
}

pub enum HeadMode<'a, S: Scalar> {
    Train(Option<&'a ChainTruth<S>>),
    Eval,
}

/// Mean over frames of a `(batch·frames, d)` state, giving `(batch, d)`.
pub fn pool<S: Scalar>(state: &Tensor<S>, batch: usize) -> Result<Tensor<S>> {
    if state.ndim() != 2 || batch == 0 || state.shape()[0] % batch != 0 {
        return Err(Error::shape("pool", format!("state {:?} with batch {batch}", state.shape())));
    }
    let frames = state.shape()[0] / batch;
    if frames == 0 {
        return Err(Error::shape("pool", "zero frames"));
    }
    let d = state.shape()[1];
    state.reshape(&[batch, frames, d])?.mean(1, false)
}

#[derive(Debug, Clone)]
struct TaskNets<S: Scalar>([TwoLayer<S>; 4]);

impl<S: Scalar> TaskNets<S> {
    /// `widths[i]` is the input width of task `Task::ALL[i]`.
    fn new(
        store: &mut ParamStore<S>,
        widths: [usize; 4],
        hidden: usize,
        dims: &TaskDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut build = |i: usize| {
            let task = Task::ALL[i];
            // regression labels live in [0,1]; start every output at its midpoint
            let bias = if task.kind() == TaskKind::Regression { 0.5 } else { 0.0 };
            TwoLayer::new(store, &format!("head.{task}.net"), ParamGroup::Head, widths[i], hidden, dims.out_dim(task), bias, rng)
        };
        Ok(Self([build(0)?, build(1)?, build(2)?, build(3)?]))
    }
}

#[derive(Debug, Clone)]
pub struct VanillaHead<S: Scalar> {
    nets: TaskNets<S>,
}

impl<S: Scalar> VanillaHead<S> {
    pub fn forward(&self, stack: &HiddenStack<S>) -> Result<HeadOutput<S>> {
        let pooled = pool(stack.top(), stack.batch)?;
        let [t, w, h, c] = &self.nets.0;
        Ok(HeadOutput {
            type_logits: t.forward(&pooled)?,
            two: w.forward(&pooled)?,
            high: h.forward(&pooled)?,
            culture: c.forward(&pooled)?,
            conditioning: None,
            attention: Vec::new(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChainHead<S: Scalar> {
    nets: TaskNets<S>,
}

impl<S: Scalar> ChainHead<S> {
    pub fn input_widths(&self) -> [usize; 4] {
        let n = &self.nets.0;
        [n[0].fan_in(), n[1].fan_in(), n[2].fan_in(), n[3].fan_in()]
    }

    pub fn forward(&self, stack: &HiddenStack<S>, mode: HeadMode<'_, S>) -> Result<HeadOutput<S>> {
        let pooled = pool(stack.top(), stack.batch)?;
        let [t, w, h, c] = &self.nets.0;
        let type_logits = t.forward(&pooled)?;
        let (source, type_cond) = match &mode {
            HeadMode::Train(Some(truth)) => (ConditioningSource::Truth, truth.type_cond.clone()),
            HeadMode::Train(None) => {
                return Err(Error::domain("chain_forward", "training mode requires ground truth"));
            }
            HeadMode::Eval => (ConditioningSource::Prediction, type_logits.softmax(1)?),
        };
        let two = w.forward(&Tensor::concat(&[&pooled, &type_cond], 1)?)?;
        let two_cond = match &mode {
            HeadMode::Train(Some(truth)) => truth.two.clone(),
            _ => two.clone(),
        };
        let high = h.forward(&Tensor::concat(&[&pooled, &type_cond, &two_cond], 1)?)?;
        let high_cond = match &mode {
            HeadMode::Train(Some(truth)) => truth.high.clone(),
            _ => high.clone(),
        };
        let culture = c.forward(&Tensor::concat(&[&pooled, &type_cond, &two_cond, &high_cond], 1)?)?;
        Ok(HeadOutput { type_logits, two, high, culture, conditioning: Some(source), attention: Vec::new() })
    }
}

#[derive(Debug, Clone)]
struct AttentionBlock<S: Scalar> {
    attn: MultiHeadAttention<S>,
    norm: LayerNorm<S>,
}

#[derive(Debug, Clone)]
pub struct BranchHead<S: Scalar> {
    /// Per task, the attention blocks in order.
    stacks: Vec<Vec<AttentionBlock<S>>>,
    /// Backbone state index each block queries.
    query_states: Vec<usize>,
    nets: TaskNets<S>,
}

/// Block `j` (1-based) of `blocks` queries state `round(j·layers/blocks)`.
pub fn branch_query_states(layers: usize, blocks: usize) -> Result<Vec<usize>> {
    if blocks == 0 || blocks > layers {
        return Err(Error::Config(format!("branch_blocks {blocks} must be in 1..={layers} (encoder layers)")));
    }
    Ok((1..=blocks).map(|j| ((j * layers) as f64 / blocks as f64).round() as usize).collect())
}

impl<S: Scalar> BranchHead<S> {
    pub fn query_states(&self) -> &[usize] {
        &self.query_states
    }

    pub fn forward(&self, stack: &HiddenStack<S>) -> Result<HeadOutput<S>> {
        if let Some(&need) = self.query_states.last() {
            if need > stack.layers() {
                return Err(Error::Config(format!("branch needs state {need}, stack has {}", stack.layers())));
            }
        }
        let mut outs = Vec::with_capacity(4);
        let mut attention = Vec::new();
        for (blocks, net) in self.stacks.iter().zip(&self.nets.0) {
            let mut memory = stack.states[0].clone();
            for (block, &qi) in blocks.iter().zip(&self.query_states) {
                let query = &stack.states[qi];
                let (mixed, probs) = block.attn.forward(query, &memory, stack.batch)?;
                memory = block.norm.forward(&query.add(&mixed)?)?;
                attention.push(probs);
            }
            outs.push(net.forward(&pool(&memory, stack.batch)?)?);
        }
        let culture = outs.pop().expect("four tasks");
        let high = outs.pop().expect("four tasks");
        let two = outs.pop().expect("four tasks");
        let type_logits = outs.pop().expect("four tasks");
        Ok(HeadOutput { type_logits, two, high, culture, conditioning: None, attention })
    }
}

#[derive(Debug, Clone)]
pub enum Head<S: Scalar> {
    Vanilla(VanillaHead<S>),
    Chain(ChainHead<S>),
    Branch(BranchHead<S>),
}

impl<S: Scalar> Head<S> {
    pub fn new(
        arch: Architecture,
        cfg: &HeadsConfig,
        d_model: usize,
        encoder_layers: usize,
        dims: &TaskDims,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        Ok(match arch {
            Architecture::Vanilla => {
                Head::Vanilla(VanillaHead { nets: TaskNets::new(store, [d_model; 4], cfg.hidden, dims, rng)? })
            }
            Architecture::Chain => {
                let c = dims.type_classes;
                let widths = [d_model, d_model + c, d_model + c + 2, d_model + c + 2 + dims.emotions];
                Head::Chain(ChainHead { nets: TaskNets::new(store, widths, cfg.hidden, dims, rng)? })
            }
            Architecture::Branch => {
                let query_states = branch_query_states(encoder_layers, cfg.branch_blocks)?;
                let mut stacks = Vec::new();
                for task in Task::ALL {
                    let blocks = (0..cfg.branch_blocks)
                        .map(|j| {
                            let name = format!("head.{task}.block{j}");
                            Ok(AttentionBlock {
                                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), ParamGroup::Head, d_model, cfg.branch_heads, rng)?,
                                norm: LayerNorm::new(store, &format!("{name}.norm"), ParamGroup::Head, d_model)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    stacks.push(blocks);
                }
                let nets = TaskNets::new(store, [d_model; 4], cfg.hidden, dims, rng)?;
                Head::Branch(BranchHead { stacks, query_states, nets })
            }
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Head::Vanilla(_) => Architecture::Vanilla,
            Head::Chain(_) => Architecture::Chain,
            Head::Branch(_) => Architecture::Branch,
        }
    }

    pub fn forward(&self, stack: &HiddenStack<S>, mode: HeadMode<'_, S>) -> Result<HeadOutput<S>> {
        match self {
            Head::Vanilla(h) => h.forward(stack),
            Head::Chain(h) => h.forward(stack, mode),
            Head::Branch(h) => h.forward(stack),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_examples() {
        let one = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        assert_eq!(pool(&one, 1).unwrap().to_vec(), vec![1.0, 2.0]);
        let frames = Tensor::new(vec![1.0, 3.0, 3.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(pool(&frames, 1).unwrap().to_vec(), vec![2.0, 2.0]);
        let constant = Tensor::new(vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0], &[3, 2]).unwrap();
        assert_eq!(pool(&constant, 1).unwrap().to_vec(), vec![0.5, -1.0]);
        assert!(pool(&frames, 3).is_err());
    }

    #[test]
    fn query_state_mapping() {
        assert_eq!(branch_query_states(4, 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(branch_query_states(12, 4).unwrap(), vec![3, 6, 9, 12]);
        assert_eq!(branch_query_states(4, 2).unwrap(), vec![2, 4]);
        assert!(branch_query_states(4, 5).is_err());
    }

    #[test]
    fn task_dims() {
        let d = TaskDims::default();
        let dims: Vec<usize> = Task::ALL.iter().map(|&t| d.out_dim(t)).collect();
        assert_eq!(dims, vec![8, 2, 10, 40]);
        assert_eq!(d.spec(Task::Type).kind, TaskKind::Classification);
    }
}
