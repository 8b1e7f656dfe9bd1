//! Text-image and text-caption incongruity extractors.
//!
//! The text-image branch lets every text row query the attended region
//! features through multi-head attention, passes the result through a
//! two-layer MLP with a residual connection and layer norm, and reads out
//! the `[CLS]` row. The text-caption branch builds a bilinear affinity
//! between text and caption rows, squashes it with `tanh`, max-pools each
//! caption column over text positions and uses the pooled weights to mix the
//! caption rows.

use rand::Rng;
use sarcasm_tensor::{Activation, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::layers::{join, xavier_uniform, Dropout};

/// Query/key/value maps of one attention head, each `d×d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = Tensor> {
    pub query: T,
    pub key: T,
    pub value: T,
}

impl<T> HeadParams<T> {
    pub fn map<'s, U>(
        &'s self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'s T) -> U,
    ) -> HeadParams<U> {
        HeadParams {
            query: f(&join(prefix, "query"), &self.query),
            key: f(&join(prefix, "key"), &self.key),
            value: f(&join(prefix, "value"), &self.value),
        }
    }

    pub fn collect_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
        out.push((join(prefix, "query"), &mut self.query));
        out.push((join(prefix, "key"), &mut self.key));
        out.push((join(prefix, "value"), &mut self.value));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams<T = Tensor> {
    pub heads: Vec<HeadParams<T>>,
    /// `d×d` map applied to the concatenated heads.
    pub output: T,
}

impl MhaParams {
    pub fn init(rng: &mut impl Rng, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(CoreError::Config(format!(
                "model width {d} is not divisible by head count {heads}"
            )));
        }
        let dk = d / heads;
        let heads = (0..heads)
            .map(|_| HeadParams {
                query: xavier_uniform(rng, d, dk),
                key: xavier_uniform(rng, d, dk),
                value: xavier_uniform(rng, d, dk),
            })
            .collect();
        Ok(Self {
            heads,
            output: xavier_uniform(rng, d, d),
        })
    }
}

impl<T> MhaParams<T> {
    pub fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> MhaParams<U> {
        MhaParams {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| h.map(&join(prefix, &format!("head{i}")), f))
                .collect(),
            output: f(&join(prefix, "output"), &self.output),
        }
    }

    pub fn collect_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.collect_mut(&join(prefix, &format!("head{i}")), out);
        }
        out.push((join(prefix, "output"), &mut self.output));
    }
}

/// Attention, a two-layer MLP (`d → d_mlp → d`) and a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub attention: MhaParams<T>,
    pub mlp_in: T,
    pub mlp_in_bias: T,
    pub mlp_out: T,
    pub mlp_out_bias: T,
    pub norm_gain: T,
    pub norm_bias: T,
}

impl BlockParams {
    pub fn init(rng: &mut impl Rng, d: usize, heads: usize, mlp_dim: usize) -> Result<Self> {
        if mlp_dim < d {
            return Err(CoreError::Config(format!(
                "MLP width {mlp_dim} must be at least the model width {d}"
            )));
        }
        Ok(Self {
            attention: MhaParams::init(rng, d, heads)?,
            mlp_in: xavier_uniform(rng, d, mlp_dim),
            mlp_in_bias: Tensor::zeros(vec![mlp_dim]),
            mlp_out: xavier_uniform(rng, mlp_dim, d),
            mlp_out_bias: Tensor::zeros(vec![d]),
            norm_gain: Tensor::ones(vec![d]),
            norm_bias: Tensor::zeros(vec![d]),
        })
    }
}

impl<T> BlockParams<T> {
    pub fn map<'s, U>(
        &'s self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'s T) -> U,
    ) -> BlockParams<U> {
        BlockParams {
            attention: self.attention.map(&join(prefix, "attention"), f),
            mlp_in: f(&join(prefix, "mlp_in"), &self.mlp_in),
            mlp_in_bias: f(&join(prefix, "mlp_in_bias"), &self.mlp_in_bias),
            mlp_out: f(&join(prefix, "mlp_out"), &self.mlp_out),
            mlp_out_bias: f(&join(prefix, "mlp_out_bias"), &self.mlp_out_bias),
            norm_gain: f(&join(prefix, "norm_gain"), &self.norm_gain),
            norm_bias: f(&join(prefix, "norm_bias"), &self.norm_bias),
        }
    }

    pub fn collect_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
        self.attention.collect_mut(&join(prefix, "attention"), out);
        out.push((join(prefix, "mlp_in"), &mut self.mlp_in));
        out.push((join(prefix, "mlp_in_bias"), &mut self.mlp_in_bias));
        out.push((join(prefix, "mlp_out"), &mut self.mlp_out));
        out.push((join(prefix, "mlp_out_bias"), &mut self.mlp_out_bias));
        out.push((join(prefix, "norm_gain"), &mut self.norm_gain));
        out.push((join(prefix, "norm_bias"), &mut self.norm_bias));
    }
}

/// Bilinear affinity map `W`, `d×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoAttnParams<T = Tensor> {
    pub bilinear: T,
}

impl CoAttnParams {
    /// Glorot-uniform map multiplied by `scale`. With layer-normed rows of
    /// norm about `√d`, `scale = 1` starts the affinities deep in the flat
    /// part of `tanh`; smaller scales keep early gradients alive.
    pub fn init(rng: &mut impl Rng, d: usize, scale: f64) -> Self {
        let mut bilinear = xavier_uniform(rng, d, d);
        if scale != 1.0 {
            bilinear.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        Self { bilinear }
    }
}

impl<T> CoAttnParams<T> {
    pub fn map<'s, U>(
        &'s self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'s T) -> U,
    ) -> CoAttnParams<U> {
        CoAttnParams {
            bilinear: f(&join(prefix, "bilinear"), &self.bilinear),
        }
    }

    pub fn collect_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
        out.push((join(prefix, "bilinear"), &mut self.bilinear));
    }
}

/// Settings shared by every attention block in a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSettings {
    pub mlp_activation: Activation,
    pub norm_eps: f64,
}

impl Default for BlockSettings {
    fn default() -> Self {
        Self {
            mlp_activation: Activation::Gelu,
            norm_eps: 1e-6,
        }
    }
}

/// Output of [`cross_modal_mha`] together with each head's attention map.
pub struct MhaOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Multi-head attention with `queries` (`T×d`) attending over `keys_values`
/// (`r×d`). `key_mask`, when given, hides keys whose entry is `false`.
pub fn cross_modal_mha(
    tape: &mut Tape,
    queries: Var,
    keys_values: Var,
    params: &MhaParams<Var>,
    key_mask: Option<&[bool]>,
) -> Result<MhaOutput> {
    let d = tape.shape(queries)[1];
    if tape.shape(keys_values).get(1) != Some(&d) {
        return Err(CoreError::Tensor(sarcasm_tensor::TensorError::Shape {
            op: "cross_modal_mha",
            lhs: tape.shape(queries).to_vec(),
            rhs: tape.shape(keys_values).to_vec(),
        }));
    }
    let h = params.heads.len();
    if h == 0 || !d.is_multiple_of(h) {
        return Err(CoreError::Config(format!(
            "model width {d} is not divisible by head count {h}"
        )));
    }
    let scale = 1.0 / ((d / h) as f64).sqrt();
    let mut outputs = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    for head in &params.heads {
        let q = tape.matmul(queries, head.query)?;
        let k = tape.matmul(keys_values, head.key)?;
        let v = tape.matmul(keys_values, head.value)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = match key_mask {
            Some(mask) => tape.softmax_rows_masked(scores, mask)?,
            None => tape.softmax_rows(scores)?,
        };
        outputs.push(tape.matmul(attn, v)?);
        weights.push(attn);
    }
    let joined = tape.concat(&outputs, 1)?;
    let output = tape.matmul(joined, params.output)?;
    Ok(MhaOutput { output, weights })
}

/// `LayerNorm(S + MLP(MHA(S, K)))` over every row of `S`.
pub fn incongruity_sequence(
    tape: &mut Tape,
    queries: Var,
    keys_values: Var,
    params: &BlockParams<Var>,
    settings: &BlockSettings,
    key_mask: Option<&[bool]>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let attended = cross_modal_mha(tape, queries, keys_values, &params.attention, key_mask)?.output;
    let attended = dropout.apply(tape, attended)?;
    let hidden = tape.linear(attended, params.mlp_in, params.mlp_in_bias)?;
    let hidden = tape.activation(hidden, settings.mlp_activation)?;
    let mlp = tape.linear(hidden, params.mlp_out, params.mlp_out_bias)?;
    let mlp = dropout.apply(tape, mlp)?;
    let residual = tape.add(queries, mlp)?;
    Ok(tape.layer_norm(
        residual,
        params.norm_gain,
        params.norm_bias,
        settings.norm_eps,
    )?)
}

/// Text-image incongruity descriptor: the `[CLS]` row (row 0) of
/// [`incongruity_sequence`], as a length-`d` vector.
pub fn incongruity_block(
    tape: &mut Tape,
    text: Var,
    regions: Var,
    params: &BlockParams<Var>,
    settings: &BlockSettings,
    dropout: &mut Dropout,
) -> Result<Var> {
    let seq = incongruity_sequence(tape, text, regions, params, settings, None, dropout)?;
    let d = tape.shape(seq)[1];
    let cls = tape.row(seq, 0)?;
    Ok(tape.reshape(cls, vec![d])?)
}

/// Intermediate values of [`coattention`].
pub struct CoAttnOutput {
    /// `tanh(S·W·Cᵀ)`, `T×U`.
    pub affinity: Var,
    /// Column maxima of the affinity, length `U`.
    pub weights: Var,
    /// `weights · C`, length `d`.
    pub descriptor: Var,
}

/// Text-caption incongruity descriptor.
pub fn coattention(
    tape: &mut Tape,
    text: Var,
    caption: Var,
    params: &CoAttnParams<Var>,
) -> Result<CoAttnOutput> {
    let sw = tape.matmul(text, params.bilinear)?;
    let ct = tape.transpose(caption)?;
    let raw = tape.matmul(sw, ct)?;
    let affinity = tape.tanh(raw)?;
    let weights = tape.reduce_max_cols(affinity)?;
    let u = tape.shape(weights)[0];
    let row = tape.reshape(weights, vec![1, u])?;
    let mixed = tape.matmul(row, caption)?;
    let d = tape.shape(mixed)[1];
    let descriptor = tape.reshape(mixed, vec![d])?;
    Ok(CoAttnOutput {
        affinity,
        weights,
        descriptor,
    })
}
