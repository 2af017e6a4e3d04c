//! Convolutional front end plus a pre-norm transformer encoder that
//! exposes every intermediate hidden state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, LayerNorm, Linear, MultiHeadAttention};
use crate::scalar::Scalar;

/// Masking probabilities are clamped to `1 − MASK_PROB_CEIL_GAP`.
pub const MASK_PROB_CEIL_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Samples per input clip.
    pub input_len: usize,
    /// Channels of every front-end convolution.
    pub conv_channels: usize,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// Per-frame and per-channel masking probability during training.
    pub mask_prob: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_len: 4000,
            conv_channels: 32,
            conv_kernels: vec![10, 8, 4],
            conv_strides: vec![8, 4, 4],
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ff_mult: 2,
            mask_prob: 0.05,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} outside [0, 1)", self.mask_prob));
        }
        if self.conv_kernels.is_empty() || self.conv_kernels.len() != self.conv_strides.len() {
            return bad("conv_kernels and conv_strides must be non-empty and equally long".into());
        }
        if let Some((k, s)) = self.conv_kernels.iter().zip(&self.conv_strides).find(|(&k, &s)| s == 0 || k < s) {
            return bad(format!("conv kernel {k} must be ≥ stride {s} > 0"));
        }
        if self.conv_channels == 0 || self.ff_mult == 0 {
            return bad("conv_channels and ff_mult must be positive".into());
        }
        if self.frames() == 0 {
            return bad(format!("input_len {} too short for the front end", self.input_len));
        }
        Ok(())
    }

    /// Frames produced for one clip.
    pub fn frames(&self) -> usize {
        self.conv_kernels.iter().zip(&self.conv_strides).fold(self.input_len, |len, (&k, &s)| {
            let pad = (k - s) / 2;
            if len + 2 * pad < k {
                0
            } else {
                (len + 2 * pad - k) / s + 1
            }
        })
    }
}

/// Embedding output plus each encoder layer's output, all `(batch·frames, d_model)`.
#[derive(Debug, Clone)]
pub struct HiddenStack<S: Scalar> {
    pub states: Vec<Tensor<S>>,
    pub batch: usize,
    pub frames: usize,
    /// Whether masking was applied while producing this stack.
    pub masked: bool,
}

impl<S: Scalar> HiddenStack<S> {
    pub fn top(&self) -> &Tensor<S> {
        self.states.last().expect("stack holds at least the embedding")
    }

    pub fn layers(&self) -> usize {
        self.states.len() - 1
    }
}

/// Source of randomness for training-time masking.
pub enum Masking<'a, R: Rng> {
    Off,
    On { prob: f64, rng: &'a mut R },
}

/// Zeroes whole frames and whole channels of `(batch·frames, d)` features,
/// each independently with probability `prob`, separately per sequence.
pub fn time_feature_mask<S: Scalar>(
    features: &Tensor<S>,
    batch: usize,
    prob: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<S>> {
    if features.ndim() != 2 || batch == 0 || features.shape()[0] % batch != 0 {
        return Err(Error::shape("time_feature_mask", format!("{:?} with batch {batch}", features.shape())));
    }
    let p = prob.clamp(0.0, 1.0 - MASK_PROB_CEIL_GAP);
    if p == 0.0 {
        return Ok(features.clone());
    }
    let (frames, d) = (features.shape()[0] / batch, features.shape()[1]);
    let mut mask = vec![S::one(); batch * frames * d];
    for b in 0..batch {
        let rows: Vec<bool> = (0..frames).map(|_| rng.gen_bool(p)).collect();
        let cols: Vec<bool> = (0..d).map(|_| rng.gen_bool(p)).collect();
        for (t, &row_masked) in rows.iter().enumerate() {
            for (c, &col_masked) in cols.iter().enumerate() {
                if row_masked || col_masked {
                    mask[(b * frames + t) * d + c] = S::zero();
                }
            }
        }
    }
    features.mul(&Tensor::new(mask, features.shape())?)
}

/// Fixed sinusoidal position table, `(frames, d)`.
pub fn sinusoidal_positions<S: Scalar>(frames: usize, d: usize) -> Vec<S> {
    let mut table = vec![S::zero(); frames * d];
    for t in 0..frames {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 / rate;
            table[t * d + i] = S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    table
}

#[derive(Debug, Clone)]
struct EncoderLayer<S: Scalar> {
    norm_attn: LayerNorm<S>,
    attn: MultiHeadAttention<S>,
    norm_ff: LayerNorm<S>,
    ff_in: Linear<S>,
    ff_out: Linear<S>,
}

impl<S: Scalar> EncoderLayer<S> {
    fn new(store: &mut ParamStore<S>, name: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let d = cfg.d_model;
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), g, d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), g, d, cfg.n_heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), g, d)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), g, d, d * cfg.ff_mult, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), g, d * cfg.ff_mult, d, rng)?,
        })
    }

    fn forward(&self, x: &Tensor<S>, batch: usize) -> Result<Tensor<S>> {
        let normed = self.norm_attn.forward(x)?;
        let (attended, _) = self.attn.forward(&normed, &normed, batch)?;
        let h = x.add(&attended)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&self.norm_ff.forward(&h)?)?.relu())?;
        h.add(&ff)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar> {
    config: BackboneConfig,
    convs: Vec<Conv1d<S>>,
    projection: Linear<S>,
    layers: Vec<EncoderLayer<S>>,
    positions: Tensor<S>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(config: &BackboneConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Backbone;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, (&k, &s)) in config.conv_kernels.iter().zip(&config.conv_strides).enumerate() {
            convs.push(Conv1d::new(store, &format!("backbone.conv{i}"), g, c_in, config.conv_channels, k, s, rng)?);
            c_in = config.conv_channels;
        }
        let projection = Linear::new(store, "backbone.projection", g, c_in, config.d_model, rng)?;
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("backbone.layer{i}"), config, rng))
            .collect::<Result<Vec<_>>>()?;
        let frames = config.frames();
        let positions = Tensor::new(sinusoidal_positions(frames, config.d_model), &[frames, config.d_model])?;
        Ok(Self { config: config.clone(), convs, projection, layers, positions })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Encodes a `(batch, input_len)` block of clips.
    pub fn encode<R: Rng>(&self, waves: &Tensor<S>, masking: Masking<'_, R>) -> Result<HiddenStack<S>> {
        if waves.ndim() != 2 || waves.shape()[1] != self.config.input_len {
            return Err(Error::shape(
                "encode",
                format!("expected (batch, {}) clips, got {:?}", self.config.input_len, waves.shape()),
            ));
        }
        let batch = waves.shape()[0];
        let mut x = waves.reshape(&[batch, self.config.input_len, 1])?;
        for conv in &self.convs {
            x = conv.forward(&x)?.relu();
        }
        let frames = x.shape()[1];
        let channels = x.shape()[2];
        let mut h = self.projection.forward(&x.reshape(&[batch * frames, channels])?)?;
        let masked = match masking {
            Masking::Off => false,
            Masking::On { prob, rng } => {
                h = time_feature_mask(&h, batch, prob, rng)?;
                true
            }
        };
        let d = self.config.d_model;
        let embedded = h.reshape(&[batch, frames, d])?.add(&self.positions)?.reshape(&[batch * frames, d])?;
        let mut states = vec![embedded];
        for layer in &self.layers {
            let next = layer.forward(states.last().expect("non-empty"), batch)?;
            states.push(next);
        }
        Ok(HiddenStack { states, batch, frames, masked })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (Backbone<f64>, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Backbone::new(&BackboneConfig::default(), &mut store, &mut rng).unwrap();
        (b, store)
    }

    fn off() -> Masking<'static, ChaCha8Rng> {
        Masking::Off
    }

    fn random_waves(batch: usize, len: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..batch * len).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[batch, len]).unwrap()
    }

    #[test]
    fn toy_config_shapes() {
        let (b, _) = build();
        assert_eq!(b.config().frames(), 31);
        let stack = b.encode(&random_waves(2, 4000, 1), off()).unwrap();
        assert_eq!(stack.states.len(), 5);
        for s in &stack.states {
            assert_eq!(s.shape(), &[62, 64]);
        }
    }

    #[test]
    fn wrong_length_rejected() {
        let (b, _) = build();
        assert!(b.encode(&Tensor::zeros(&[1, 3999]), off()).is_err());
    }

    #[test]
    fn zero_input_is_finite_and_deterministic() {
        let (b, _) = build();
        let a = b.encode(&Tensor::zeros(&[1, 4000]), off()).unwrap();
        let c = b.encode(&Tensor::zeros(&[1, 4000]), off()).unwrap();
        for (x, y) in a.states.iter().zip(&c.states) {
            assert!(x.data().iter().all(|v| v.is_finite()));
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn mask_prob_zero_is_identity() {
        let x = random_waves(31, 64, 2).reshape(&[31, 64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(time_feature_mask(&x, 1, 0.0, &mut rng).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn mask_prob_one_saturates() {
        let x = Tensor::<f64>::full(&[200, 16], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = time_feature_mask(&x, 1, 1.0, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut c = BackboneConfig { d_model: 30, ..Default::default() };
        assert!(c.validate().is_err());
        c = BackboneConfig { mask_prob: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        c = BackboneConfig { input_len: 4, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
