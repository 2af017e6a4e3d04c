//! Parameterized layers shared by the backbone and the task heads.

use rand::Rng;

use crate::diffcore::{conv1d, scaled_dot_product_attention, ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Affine map `x·W + b` on `(rows, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    weight: Tensor<S>,
    bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (3.0 / fan_in as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), group, &[fan_in, fan_out], bound, rng)?;
        let bias = store.add_const(format!("{name}.bias"), group, &[fan_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    /// Zero weights and a constant bias, so the layer starts out ignoring
    /// its input.
    pub fn constant(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: f64,
    ) -> Result<Self> {
        let weight = store.add_const(format!("{name}.weight"), group, &[fan_in, fan_out], 0.0)?;
        let bias = store.add_const(format!("{name}.bias"), group, &[fan_out], bias)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Row standardization followed by a learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<S: Scalar> {
    gain: Tensor<S>,
    shift: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(store: &mut ParamStore<S>, name: &str, group: ParamGroup, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_const(format!("{name}.gain"), group, &[width], 1.0)?,
            shift: store.add_const(format!("{name}.shift"), group, &[width], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(S::lit(LAYER_NORM_EPS))?.mul(&self.gain)?.add(&self.shift)
    }
}

/// Strided 1-D convolution on `(batch, len, channels)` input with
/// `(kernel − stride) / 2` zero padding per side.
#[derive(Debug, Clone)]
pub struct Conv1d<S: Scalar> {
    weight: Tensor<S>,
    bias: Tensor<S>,
    kernel: usize,
    stride: usize,
}

impl<S: Scalar> Conv1d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if stride == 0 || kernel < stride {
            return Err(Error::Config(format!("conv `{name}`: kernel {kernel} must be ≥ stride {stride} > 0")));
        }
        let bound = (6.0 / (kernel * c_in) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), group, &[kernel * c_in, c_out], bound, rng)?;
        let bias = store.add_const(format!("{name}.bias"), group, &[c_out], 0.0)?;
        Ok(Self { weight, bias, kernel, stride })
    }

    pub fn padding(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv1d(x, &self.weight, self.kernel, self.stride, self.padding())?.add(&self.bias)
    }
}

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<S: Scalar> {
    query: Linear<S>,
    key: Linear<S>,
    value: Linear<S>,
    output: Linear<S>,
    heads: usize,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("attention `{name}`: width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), group, width, width, rng)?,
            key: Linear::new(store, &format!("{name}.key"), group, width, width, rng)?,
            value: Linear::new(store, &format!("{name}.value"), group, width, width, rng)?,
            output: Linear::new(store, &format!("{name}.output"), group, width, width, rng)?,
            heads,
        })
    }

    /// Attends from `(batch·tq, d)` queries over `(batch·tk, d)` memory.
    /// Also returns the attention probabilities `[batch][head][tq][tk]`.
    pub fn forward(&self, queries: &Tensor<S>, memory: &Tensor<S>, batch: usize) -> Result<(Tensor<S>, Vec<S>)> {
        let q = self.query.forward(queries)?;
        let k = self.key.forward(memory)?;
        let v = self.value.forward(memory)?;
        let (mixed, probs) = scaled_dot_product_attention(&q, &k, &v, self.heads, batch)?;
        Ok((self.output.forward(&mixed)?, probs))
    }
}

/// Hidden fully connected layer with a rectifier, then an output layer.
/// The output layer starts at zero weights with every output equal to
/// `out_bias`.
#[derive(Debug, Clone)]
pub struct TwoLayer<S: Scalar> {
    hidden: Linear<S>,
    out: Linear<S>,
}

impl<S: Scalar> TwoLayer<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        out_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), group, fan_in, hidden, rng)?,
            out: Linear::constant(store, &format!("{name}.out"), group, hidden, fan_out, out_bias)?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.out.forward(&self.hidden.forward(x)?.relu())
    }

    pub fn fan_in(&self) -> usize {
        self.hidden.fan_in()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..5 * 16).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let y = Tensor::new(x, &[5, 16]).unwrap().layer_norm(LAYER_NORM_EPS).unwrap();
        for row in y.data().chunks(16) {
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_padding_gives_floor_division() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lens: Vec<usize> = [(10, 8), (8, 4), (4, 4)]
            .iter()
            .enumerate()
            .scan(4000, |len, (i, &(k, s))| {
                let c = Conv1d::new(&mut store, &format!("c{i}"), ParamGroup::Backbone, 1, 1, k, s, &mut rng).unwrap();
                *len = c.output_len(*len);
                Some(*len)
            })
            .collect();
        assert_eq!(lens, vec![500, 125, 31]);
    }
}
