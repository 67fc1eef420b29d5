//! Transformer building blocks on top of the tape.
//!
//! Parameter structs are generic over the leaf type so the same layout
//! describes stored weights (`Tensor`) and their tape handles (`Var`).

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Glorot-uniform weight matrix.
pub fn init_weight(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

/// Small normal entries for embeddings and learned tokens.
pub fn init_embedding(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std > 0");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: init_weight(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

impl<T> Linear<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a, F: FnMut(String, &'a T)>(&'a self, prefix: &str, f: &mut F) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormParams<Tensor> {
    pub fn init(width: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(&[1, width], 1.0),
            beta: Tensor::zeros(&[1, width]),
        }
    }
}

impl<T> LayerNormParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    pub fn visit<'a, F: FnMut(String, &'a T)>(&'a self, prefix: &str, f: &mut F) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
}

impl LayerNormParams<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

/// Multi-head attention projections. Heads share the `d × d` matrices and
/// read disjoint column blocks of them.
///
/// The key projection has no bias: a key bias shifts every score in a row by
/// the same amount and cancels in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub query: Linear<T>,
    pub key: T,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl AttentionParams<Tensor> {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            query: Linear::init(d, d, rng),
            key: init_weight(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
        }
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> AttentionParams<U> {
        AttentionParams {
            query: self.query.map(f),
            key: f(&self.key),
            value: self.value.map(f),
            output: self.output.map(f),
        }
    }

    pub fn visit<'a, F: FnMut(String, &'a T)>(&'a self, prefix: &str, f: &mut F) {
        self.query.visit(&format!("{prefix}.query"), f);
        f(format!("{prefix}.key.weight"), &self.key);
        self.value.visit(&format!("{prefix}.value"), f);
        self.output.visit(&format!("{prefix}.output"), f);
    }
}

/// Output of [`multi_head_self_attention`]: the projected sequence and one
/// `s × s` attention matrix per head.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    params: &AttentionParams<Var>,
    heads: usize,
) -> Result<AttentionOutput, TensorError> {
    let d = tape.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;
    let q = params.query.forward(tape, x)?;
    let k = tape.matmul(x, params.key)?;
    let v = params.value.forward(tape, x)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        outputs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    let output = params.output.forward(tape, merged)?;
    Ok(AttentionOutput { output, weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub attention: AttentionParams<T>,
    pub norm1: LayerNormParams<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub norm2: LayerNormParams<T>,
}

impl EncoderLayerParams<Tensor> {
    /// Feed-forward hidden width is `4d`.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        EncoderLayerParams {
            attention: AttentionParams::init(d, rng),
            norm1: LayerNormParams::init(d),
            ffn_in: Linear::init(d, 4 * d, rng),
            ffn_out: Linear::init(4 * d, d, rng),
            norm2: LayerNormParams::init(d),
        }
    }
}

impl<T> EncoderLayerParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> EncoderLayerParams<U> {
        EncoderLayerParams {
            attention: self.attention.map(f),
            norm1: self.norm1.map(f),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
            norm2: self.norm2.map(f),
        }
    }

    pub fn visit<'a, F: FnMut(String, &'a T)>(&'a self, prefix: &str, f: &mut F) {
        self.attention.visit(&format!("{prefix}.attention"), f);
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.ffn_in.visit(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit(&format!("{prefix}.ffn_out"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
    }
}

/// Post-norm encoder block: `y = LN(x + MHSA(x))`, `out = LN(y + FFN(y))`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    params: &EncoderLayerParams<Var>,
    heads: usize,
) -> Result<AttentionOutput, TensorError> {
    let attn = multi_head_self_attention(tape, x, &params.attention, heads)?;
    let res1 = tape.add(x, attn.output)?;
    let y = params.norm1.forward(tape, res1)?;
    let hidden = params.ffn_in.forward(tape, y)?;
    let hidden = tape.relu(hidden);
    let ffn = params.ffn_out.forward(tape, hidden)?;
    let res2 = tape.add(y, ffn)?;
    let output = params.norm2.forward(tape, res2)?;
    Ok(AttentionOutput {
        output,
        weights: attn.weights,
    })
}
