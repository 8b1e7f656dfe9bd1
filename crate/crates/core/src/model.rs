//! Full forward pass, fusion, classifier, loss and ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sarcasm_tensor::{Activation, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{compute_metrics, Averaging, MetricsReport};
use crate::encoders::{encode_sequence, EncoderConfig, EncoderParams, Provider, TokenizedSequence};
use crate::error::{CoreError, Result};
use crate::incongruity::{
    coattention, incongruity_block, BlockParams, BlockSettings, CoAttnParams,
};
use crate::layers::{join, xavier_uniform, Dropout};
use crate::visual::{grid_side, visual_branch, CoordAttnParams, VisualParams};

/// Probability floor and ceiling applied before the log in the loss.
pub const PROB_CLAMP: f64 = 1e-12;

mod activation_name {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &Activation, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(a.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Activation, D::Error> {
        let name = String::deserialize(d)?;
        Activation::from_str(&name).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    /// Region count `r`, a perfect square.
    pub regions: usize,
    /// Raw width of each region feature row.
    pub region_dim: usize,
    /// Hidden width of the attention-block MLP; `2d` when unset.
    pub mlp_dim: Option<usize>,
    /// Channel reduction of the coordinate attention squeeze.
    pub reduction: usize,
    #[serde(with = "activation_name")]
    pub squeeze_activation: Activation,
    #[serde(with = "activation_name")]
    pub mlp_activation: Activation,
    /// L2 coefficient on all trainable entries.
    pub l2: f64,
    pub layer_norm_eps: f64,
    /// Multiplier on the Glorot initialization of the co-attention map.
    pub bilinear_init_scale: f64,
    pub use_visual_attention: bool,
    pub use_tau_si: bool,
    pub use_tau_sc: bool,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            regions: 49,
            region_dim: 2048,
            mlp_dim: None,
            reduction: 4,
            squeeze_activation: Activation::Relu,
            mlp_activation: Activation::Gelu,
            l2: 1e-5,
            layer_norm_eps: 1e-6,
            bilinear_init_scale: 1.0,
            use_visual_attention: true,
            use_tau_si: true,
            use_tau_sc: true,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn mlp_dim(&self) -> usize {
        self.mlp_dim.unwrap_or(2 * self.d)
    }

    /// Width of the fused vector `F`.
    pub fn fused_dim(&self) -> usize {
        self.d * (usize::from(self.use_tau_si) + usize::from(self.use_tau_sc))
    }

    pub fn block_settings(&self) -> BlockSettings {
        BlockSettings {
            mlp_activation: self.mlp_activation,
            norm_eps: self.layer_norm_eps,
        }
    }

    /// Whether a trainable toy encoder is part of the model.
    pub fn has_toy_encoder(&self) -> bool {
        self.encoder.provider == Provider::Toy
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_tau_si && !self.use_tau_sc {
            return Err(CoreError::Config(
                "at least one of use_tau_si and use_tau_sc must be enabled".into(),
            ));
        }
        if self.d < 2 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "width d={} must be at least 2 and divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.mlp_dim() < self.d {
            return Err(CoreError::Config(format!(
                "mlp_dim {} is smaller than d={}",
                self.mlp_dim(),
                self.d
            )));
        }
        if self.use_tau_si {
            grid_side(self.regions)?;
            if self.region_dim == 0 {
                return Err(CoreError::Config("region_dim must be positive".into()));
            }
            if self.use_visual_attention
                && (self.reduction == 0 || !self.d.is_multiple_of(self.reduction))
            {
                return Err(CoreError::Config(format!(
                    "d={} is not divisible by reduction={}",
                    self.d, self.reduction
                )));
            }
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(CoreError::Config(format!(
                "l2 must be finite and non-negative, got {}",
                self.l2
            )));
        }
        if !(self.bilinear_init_scale > 0.0 && self.bilinear_init_scale.is_finite()) {
            return Err(CoreError::Config(
                "bilinear_init_scale must be positive".into(),
            ));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(CoreError::Config("layer_norm_eps must be positive".into()));
        }
        self.encoder.validate()
    }
}

/// The full model and its three ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoVisualAttention,
    NoTauSi,
    NoTauSc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoVisualAttention,
        Variant::NoTauSi,
        Variant::NoTauSc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVisualAttention => "no_visual_attention",
            Variant::NoTauSi => "no_tau_si",
            Variant::NoTauSc => "no_tau_sc",
        }
    }

    /// `base` with this variant's switches applied.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.use_visual_attention = true;
        c.use_tau_si = true;
        c.use_tau_sc = true;
        match self {
            Variant::Full => {}
            Variant::NoVisualAttention => c.use_visual_attention = false,
            Variant::NoTauSi => c.use_tau_si = false,
            Variant::NoTauSc => c.use_tau_sc = false,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown variant `{s}`")))
    }
}

/// Classifier `W_t` (`2×dim F`) and bias (`2`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> ClassifierParams<T> {
    pub fn map<'s, U>(
        &'s self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'s T) -> U,
    ) -> ClassifierParams<U> {
        ClassifierParams {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    pub fn collect_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Every trainable tensor of one variant. `T` is [`Tensor`] for stored
/// parameters and [`Var`] once bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub text_encoder: Option<EncoderParams<T>>,
    /// Present only when text and caption encoders are not shared.
    pub caption_encoder: Option<EncoderParams<T>>,
    pub visual: Option<VisualParams<T>>,
    pub incongruity: Option<BlockParams<T>>,
    pub coattention: Option<CoAttnParams<T>>,
    pub classifier: ClassifierParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<'s, U>(&'s self, f: &mut dyn FnMut(&str, &'s T) -> U) -> ModelParams<U> {
        ModelParams {
            text_encoder: self.text_encoder.as_ref().map(|e| e.map("text_encoder", f)),
            caption_encoder: self
                .caption_encoder
                .as_ref()
                .map(|e| e.map("caption_encoder", f)),
            visual: self.visual.as_ref().map(|v| v.map("visual", f)),
            incongruity: self.incongruity.as_ref().map(|b| b.map("incongruity", f)),
            coattention: self.coattention.as_ref().map(|c| c.map("coattention", f)),
            classifier: self.classifier.map("classifier", f),
        }
    }

    /// Mutable `(name, slot)` pairs in the same order as [`Self::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.text_encoder {
            e.collect_mut("text_encoder", &mut out);
        }
        if let Some(e) = &mut self.caption_encoder {
            e.collect_mut("caption_encoder", &mut out);
        }
        if let Some(v) = &mut self.visual {
            v.collect_mut("visual", &mut out);
        }
        if let Some(b) = &mut self.incongruity {
            b.collect_mut("incongruity", &mut out);
        }
        if let Some(c) = &mut self.coattention {
            c.collect_mut("coattention", &mut out);
        }
        self.classifier.collect_mut("classifier", &mut out);
        out
    }

    /// `(name, slot)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    /// Rebuilds the same structure with slots taken from `values` in
    /// canonical order.
    pub fn with_slots<U>(&self, values: Vec<U>) -> Result<ModelParams<U>> {
        let expected = self.named().len();
        if values.len() != expected {
            return Err(CoreError::Contract(format!(
                "{} slots given for a parameter tree of {expected}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_, _| it.next().expect("length checked")))
    }
}

impl ModelParams {
    pub fn num_tensors(&self) -> usize {
        self.named().len()
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// `Σ w²` over every trainable entry.
    pub fn sum_squares(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sum_squares()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Binds every tensor as a trainable leaf of `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelParams<Var> {
        self.map(&mut |_, t| tape.param(t))
    }

    /// Binds every tensor as a constant (no gradients), for inference.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> ModelParams<Var> {
        self.map(&mut |_, t| tape.constant_ref(t))
    }
}

/// Allocates the tensors needed by `config`'s variant. Matrices use
/// Glorot-uniform initialization, biases start at zero and layer-norm gains
/// at one. The same seed yields bit-identical parameters.
pub fn build_variant(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d;
    let enc = &config.encoder;
    let toy = |rng: &mut ChaCha8Rng| {
        EncoderParams::init(
            rng,
            enc.vocab_size,
            d,
            config.heads,
            config.mlp_dim(),
            enc.layers,
        )
    };
    let text_encoder = if config.has_toy_encoder() {
        Some(toy(&mut rng)?)
    } else {
        None
    };
    let caption_encoder =
        if config.has_toy_encoder() && config.use_tau_sc && !enc.share_text_caption {
            Some(toy(&mut rng)?)
        } else {
            None
        };
    let (visual, incongruity) = if config.use_tau_si {
        let projection = xavier_uniform(&mut rng, config.region_dim, d);
        let attention = if config.use_visual_attention {
            Some(CoordAttnParams::init(&mut rng, d, config.reduction)?)
        } else {
            None
        };
        let block = BlockParams::init(&mut rng, d, config.heads, config.mlp_dim())?;
        (
            Some(VisualParams {
                projection,
                attention,
            }),
            Some(block),
        )
    } else {
        (None, None)
    };
    let coattention = config
        .use_tau_sc
        .then(|| CoAttnParams::init(&mut rng, d, config.bilinear_init_scale));
    let classifier = ClassifierParams {
        weight: xavier_uniform(&mut rng, 2, config.fused_dim()),
        bias: Tensor::zeros(vec![2]),
    };
    Ok(ModelParams {
        text_encoder,
        caption_encoder,
        visual,
        incongruity,
        coattention,
        classifier,
    })
}

/// A text or caption, either as token ids for the toy encoder or as a
/// precomputed feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceInput {
    Tokens(TokenizedSequence),
    Features(Tensor),
}

/// One sample ready for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub id: String,
    pub text: SequenceInput,
    pub caption: Option<SequenceInput>,
    /// `r×raw` region features.
    pub regions: Option<Tensor>,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[p(non-sarcastic), p(sarcastic)]`.
    pub probs: [f64; 2],
    pub label: u8,
    /// Fused vector `F`.
    pub fused: Vec<f64>,
}

impl Prediction {
    fn from_probs(probs: [f64; 2], fused: Vec<f64>) -> Self {
        Self {
            probs,
            label: u8::from(probs[1] > probs[0]),
            fused,
        }
    }
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    /// Class probabilities, shape `[2]`.
    pub probs: Var,
    pub fused: Var,
}

#[allow(clippy::too_many_arguments)]
fn encode<'a>(
    tape: &mut Tape<'a>,
    input: &'a SequenceInput,
    encoder: Option<&EncoderParams<Var>>,
    config: &ModelConfig,
    expected_len: usize,
    what: &str,
    id: &str,
    dropout: &mut Dropout,
) -> Result<Var> {
    let rows = match input {
        SequenceInput::Tokens(seq) => seq.ids.len(),
        SequenceInput::Features(t) => t.shape()[0],
    };
    if rows != expected_len {
        return Err(CoreError::Data(format!(
            "sample {id}: {what} has length {rows}, expected {expected_len}"
        )));
    }
    match (input, encoder) {
        (SequenceInput::Tokens(seq), Some(enc)) => {
            encode_sequence(tape, seq, enc, &config.block_settings(), dropout)
        }
        (SequenceInput::Features(t), _) => {
            if t.shape() != [expected_len, config.d] {
                return Err(CoreError::Data(format!(
                    "sample {id}: {what} features have shape {:?}, expected {:?}",
                    t.shape(),
                    [expected_len, config.d]
                )));
            }
            Ok(tape.constant_ref(t))
        }
        (SequenceInput::Tokens(_), None) => Err(CoreError::Data(format!(
            "sample {id}: {what} is given as tokens but the model has no trainable encoder"
        ))),
    }
}

/// Records one sample's forward pass on `tape`.
pub fn forward_on_tape<'a>(
    tape: &mut Tape<'a>,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    input: &'a ModelInput,
    dropout: &mut Dropout,
) -> Result<ForwardVars> {
    let id = input.id.as_str();
    let enc = &config.encoder;
    let s = encode(
        tape,
        &input.text,
        params.text_encoder.as_ref(),
        config,
        enc.text_len,
        "text",
        id,
        dropout,
    )?;
    let mut parts = Vec::with_capacity(2);
    if config.use_tau_si {
        let regions = input.regions.as_ref().ok_or_else(|| {
            CoreError::Data(format!(
                "sample {id}: region features are required by this variant"
            ))
        })?;
        let expected = [config.regions, config.region_dim];
        if regions.shape() != expected {
            return Err(CoreError::Data(format!(
                "sample {id}: region features have shape {:?}, expected {expected:?}",
                regions.shape()
            )));
        }
        let (visual, block) = match (&params.visual, &params.incongruity) {
            (Some(v), Some(b)) => (v, b),
            _ => {
                return Err(CoreError::Contract(
                    "parameters lack the text-image branch".into(),
                ))
            }
        };
        let r = tape.constant_ref(regions);
        let image = visual_branch(tape, r, visual, config.squeeze_activation)?;
        parts.push(incongruity_block(
            tape,
            s,
            image,
            block,
            &config.block_settings(),
            dropout,
        )?);
    }
    if config.use_tau_sc {
        let caption = input.caption.as_ref().ok_or_else(|| {
            CoreError::Data(format!("sample {id}: caption is required by this variant"))
        })?;
        let caption_encoder = params
            .caption_encoder
            .as_ref()
            .or(params.text_encoder.as_ref());
        let c = encode(
            tape,
            caption,
            caption_encoder,
            config,
            enc.caption_len,
            "caption",
            id,
            dropout,
        )?;
        let co = params
            .coattention
            .as_ref()
            .ok_or_else(|| CoreError::Contract("parameters lack the text-caption branch".into()))?;
        parts.push(coattention(tape, s, c, co)?.descriptor);
    }
    let fused = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 0)?
    };
    let dim = tape.shape(fused)[0];
    let column = tape.reshape(fused, vec![dim, 1])?;
    let logits = tape.matmul(params.classifier.weight, column)?;
    let logits = tape.reshape(logits, vec![2])?;
    let logits = tape.add(logits, params.classifier.bias)?;
    let row = tape.reshape(logits, vec![1, 2])?;
    let probs = tape.softmax_rows(row)?;
    let probs = tape.reshape(probs, vec![2])?;
    Ok(ForwardVars { probs, fused })
}

/// Inference with dropout off.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    input: &ModelInput,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let out = forward_on_tape(&mut tape, &bound, config, input, &mut Dropout::disabled())?;
    let p = tape.value(out.probs).data();
    Ok(Prediction::from_probs(
        [p[0], p[1]],
        tape.value(out.fused).data().to_vec(),
    ))
}

pub(crate) fn check_label(id: &str, label: Option<u8>) -> Result<u8> {
    match label {
        Some(y @ (0 | 1)) => Ok(y),
        Some(y) => Err(CoreError::Data(format!(
            "sample {id}: label {y} is not 0 or 1"
        ))),
        None => Err(CoreError::Data(format!("sample {id}: a label is required"))),
    }
}

/// Loss terms recorded by [`batch_loss`].
pub struct BatchLoss {
    /// Mean cross-entropy plus the L2 penalty.
    pub loss: Var,
    pub probs: Vec<[f64; 2]>,
}

/// Mean binary cross-entropy over `batch` plus `λ·Σw²` over `params`.
pub fn batch_loss<'a>(
    tape: &mut Tape<'a>,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    batch: &[&'a ModelInput],
    dropout: &mut Dropout,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(CoreError::Contract("loss needs a non-empty batch".into()));
    }
    let mut picked = Vec::with_capacity(batch.len());
    let mut probs = Vec::with_capacity(batch.len());
    for &input in batch {
        let y = check_label(&input.id, input.label)?;
        let out = forward_on_tape(tape, params, config, input, dropout)?;
        let p = tape.value(out.probs).data();
        probs.push([p[0], p[1]]);
        let py = tape.slice(out.probs, 0, usize::from(y), 1)?;
        let py = tape.clamp(py, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        picked.push(tape.ln(py)?);
    }
    let logs = tape.concat(&picked, 0)?;
    let mean = tape.mean(logs)?;
    let mut loss = tape.scale(mean, -1.0)?;
    if config.l2 > 0.0 {
        let mut penalty = None;
        for (_, &v) in params.named() {
            let sq = tape.sum_squares(v)?;
            penalty = Some(match penalty {
                None => sq,
                Some(acc) => tape.add(acc, sq)?,
            });
        }
        if let Some(p) = penalty {
            let p = tape.scale(p, config.l2)?;
            loss = tape.add(loss, p)?;
        }
    }
    Ok(BatchLoss { loss, probs })
}

/// Evaluation of a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    /// Mean cross-entropy plus the L2 penalty; `NaN` when the set is empty.
    pub loss: f64,
    pub metrics: Option<MetricsReport>,
}

/// Cross-entropy of one prediction with the loss clamp.
pub fn cross_entropy(probs: [f64; 2], label: u8) -> f64 {
    -probs[usize::from(label)]
        .clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        .ln()
}

/// Predicts every input in parallel. Results are gathered in input order and
/// reduced sequentially, so the outcome does not depend on thread count.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    inputs: &[ModelInput],
) -> Result<Evaluation> {
    let predictions: Vec<Prediction> = inputs
        .par_iter()
        .map(|input| predict(params, config, input))
        .collect::<Result<_>>()?;
    let labelled = inputs.iter().all(|i| i.label.is_some());
    if inputs.is_empty() || !labelled {
        return Ok(Evaluation {
            predictions,
            loss: f64::NAN,
            metrics: None,
        });
    }
    let gold: Vec<u8> = inputs
        .iter()
        .map(|i| check_label(&i.id, i.label))
        .collect::<Result<_>>()?;
    let ce: f64 = predictions
        .iter()
        .zip(&gold)
        .map(|(p, &y)| cross_entropy(p.probs, y))
        .sum::<f64>()
        / inputs.len() as f64;
    let loss = ce + config.l2 * params.sum_squares();
    let predicted: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let metrics = compute_metrics(&predicted, &gold, Averaging::Binary)?;
    Ok(Evaluation {
        predictions,
        loss,
        metrics: Some(metrics),
    })
}
