//! Central-difference checks over every tape operation, each model
//! component and the full loss of every variant.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarcasm_tensor::{
    finite_diff_check, Activation, GradCheckError, GradCheckOptions, GradCheckReport, PoolAxis,
    Tape, Tensor, TensorError, Var,
};

use crate::encoders::{encode_sequence, EncoderConfig, EncoderParams, TokenizedSequence, CLS, PAD};
use crate::error::CoreError;
use crate::incongruity::{
    coattention, cross_modal_mha, incongruity_block, BlockParams, BlockSettings, CoAttnParams,
    MhaParams,
};
use crate::layers::Dropout;
use crate::model::{batch_loss, build_variant, ModelConfig, ModelInput, SequenceInput, Variant};
use crate::visual::{coordinate_attention, CoordAttnParams};

/// Fresh inputs are drawn this many times when a base point lies near a
/// kink before the check is reported as failed.
pub const MAX_ATTEMPTS: usize = 20;

type Loss<'a> = Box<dyn Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError> + 'a>;

/// Parameters to perturb and the scalar function of them.
pub struct CheckCase<'a> {
    pub params: Vec<(String, Tensor)>,
    pub loss: Loss<'a>,
}

pub struct CheckOutcome {
    pub name: String,
    pub result: Result<GradCheckReport, GradCheckError>,
    pub attempts: usize,
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.passed())
    }

    pub fn max_rel_error(&self) -> Option<f64> {
        self.result
            .as_ref()
            .ok()
            .map(GradCheckReport::max_rel_error)
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "ok" } else { "FAILED" };
        match &self.result {
            Ok(r) => {
                let entries: usize = r.tensors.iter().map(|t| t.checked).sum();
                write!(
                    f,
                    "{:<36} {status:<6} max_rel_err={:.3e} entries={entries} attempts={} ({:.2?})",
                    self.name,
                    r.max_rel_error(),
                    self.attempts,
                    self.elapsed
                )?;
                if let Some(err) = r.worst_failure() {
                    write!(f, "\n    {err}")?;
                }
                Ok(())
            }
            Err(e) => write!(f, "{:<36} {status:<6} {e}", self.name),
        }
    }
}

fn to_tensor_error(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

/// Uniform entries in `[-1, 1]`.
pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

/// `Σ out ⊙ R` with `R` fixed by the output shape, turning any output into a
/// scalar whose gradient reaches every entry.
fn project(tape: &mut Tape, out: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(out).to_vec();
    let weights = random_tensor(&mut ChaCha8Rng::seed_from_u64(0x5eed), shape);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn named(prefix: &str, tensors: Vec<Tensor>) -> Vec<(String, Tensor)> {
    tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("{prefix}{i}"), t))
        .collect()
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

/// `(name, input shapes, op)` for every recorded operation.
fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("add", vec![vec![3, 3], vec![3, 3]], |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![vec![3, 3], vec![3, 3]], |t, v| {
            t.sub(v[0], v[1])
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| {
            t.add_row(v[0], v[1])
        }),
        ("mul", vec![vec![3, 3], vec![3, 3]], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("scale", vec![vec![2, 3]], |t, v| t.scale(v[0], -1.7)),
        ("sum", vec![vec![2, 3]], |t, v| t.sum(v[0])),
        ("mean", vec![vec![2, 3]], |t, v| t.mean(v[0])),
        ("sum_squares", vec![vec![2, 3]], |t, v| t.sum_squares(v[0])),
        ("tanh", vec![vec![3, 4]], |t, v| t.tanh(v[0])),
        ("sigmoid", vec![vec![3, 4]], |t, v| t.sigmoid(v[0])),
        ("relu", vec![vec![3, 4]], |t, v| t.relu(v[0])),
        ("gelu", vec![vec![3, 4]], |t, v| t.gelu(v[0])),
        ("softmax_rows", vec![vec![3, 5]], |t, v| {
            t.softmax_rows(v[0])
        }),
        ("softmax_rows_masked", vec![vec![3, 5]], |t, v| {
            t.softmax_rows_masked(v[0], &[true, false, true, true, false])
        }),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
        ("reduce_max_cols", vec![vec![4, 5]], |t, v| {
            t.reduce_max_cols(v[0])
        }),
        ("avg_pool_width", vec![vec![2, 3, 4]], |t, v| {
            t.avg_pool_axis(v[0], PoolAxis::Width)
        }),
        ("avg_pool_height", vec![vec![2, 3, 4]], |t, v| {
            t.avg_pool_axis(v[0], PoolAxis::Height)
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| {
            t.concat(&[v[0], v[1]], 0)
        }),
        ("concat_cols", vec![vec![2, 3], vec![2, 2]], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("slice", vec![vec![3, 5]], |t, v| t.slice(v[0], 1, 1, 3)),
        ("row", vec![vec![3, 5]], |t, v| t.row(v[0], 2)),
        ("reshape", vec![vec![3, 4]], |t, v| {
            t.reshape(v[0], vec![2, 6])
        }),
        (
            "gate_mul_height",
            vec![vec![2, 3, 4], vec![2, 3, 1]],
            |t, v| t.gate_mul(v[0], v[1]),
        ),
        (
            "gate_mul_width",
            vec![vec![2, 3, 4], vec![2, 1, 4]],
            |t, v| t.gate_mul(v[0], v[1]),
        ),
        ("gather_rows", vec![vec![5, 3]], |t, v| {
            t.gather_rows(v[0], &[0, 2, 2, 4])
        }),
        ("ln", vec![vec![2, 3]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let shifted = t.add(sq, v[0])?;
            let c = t.constant(Tensor::full(vec![2, 3], 1.0));
            let pos = t.add(shifted, c)?;
            t.ln(pos)
        }),
        ("clamp", vec![vec![2, 3]], |t, v| t.clamp(v[0], -2.0, 2.0)),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |t, v| {
            t.linear(v[0], v[1], v[2])
        }),
        ("dropout", vec![vec![3, 4]], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            t.dropout(v[0], 0.5, &mut rng)
        }),
    ]
}

fn op_case<'a>(shapes: &[Vec<usize>], op: OpFn, rng: &mut ChaCha8Rng) -> CheckCase<'a> {
    let params = named(
        "input",
        shapes
            .iter()
            .map(|s| random_tensor(rng, s.clone()))
            .collect(),
    );
    CheckCase {
        params,
        loss: Box::new(move |tape, vars| {
            let out = op(tape, vars)?;
            project(tape, out)
        }),
    }
}

/// Coordinate attention on a random 4×3×3 map, checked over the map and all
/// three convolutions.
pub fn coordinate_attention_case<'a>(rng: &mut ChaCha8Rng) -> CheckCase<'a> {
    let p = CoordAttnParams::init(rng, 4, 2).expect("4 is divisible by 2");
    let x = random_tensor(rng, vec![4, 3, 3]);
    let mut params = vec![("x".to_string(), x)];
    params.extend(
        p.map("coord", &mut |n, t| (n.to_string(), t.clone()))
            .into_list(),
    );
    CheckCase {
        params,
        loss: Box::new(|tape, v| {
            let p = CoordAttnParams {
                squeeze: v[1],
                expand_h: v[2],
                expand_w: v[3],
            };
            let out = coordinate_attention(tape, v[0], &p, Activation::Relu)
                .map_err(to_tensor_error)?
                .output;
            project(tape, out)
        }),
    }
}

impl<T> CoordAttnParams<T> {
    fn into_list(self) -> Vec<T> {
        vec![self.squeeze, self.expand_h, self.expand_w]
    }
}

fn mha_from(vars: &[Var], heads: usize) -> MhaParams<Var> {
    MhaParams {
        heads: (0..heads)
            .map(|h| crate::incongruity::HeadParams {
                query: vars[3 * h],
                key: vars[3 * h + 1],
                value: vars[3 * h + 2],
            })
            .collect(),
        output: vars[3 * heads],
    }
}

fn flatten<T: Clone>(named: Vec<(String, &T)>) -> Vec<(String, T)> {
    named.into_iter().map(|(n, t)| (n, t.clone())).collect()
}

/// Cross-modal attention with `T=3`, `r=4`, `d=8`, `h=2`, checked over the
/// queries, the keys/values and every map.
pub fn cross_modal_mha_case<'a>(rng: &mut ChaCha8Rng) -> CheckCase<'a> {
    let p = MhaParams::init(rng, 8, 2).expect("8 is divisible by 2");
    let mut params = vec![
        ("text".to_string(), random_tensor(rng, vec![3, 8])),
        ("regions".to_string(), random_tensor(rng, vec![4, 8])),
    ];
    let mut list = Vec::new();
    p.map("mha", &mut |n, t| list.push((n.to_string(), t.clone())));
    params.extend(list);
    CheckCase {
        params,
        loss: Box::new(|tape, v| {
            let p = mha_from(&v[2..], 2);
            let out = cross_modal_mha(tape, v[0], v[1], &p, None)
                .map_err(to_tensor_error)?
                .output;
            project(tape, out)
        }),
    }
}

fn block_list(p: &BlockParams) -> Vec<(String, Tensor)> {
    let mut list = Vec::new();
    p.map("block", &mut |n, t| list.push((n.to_string(), t.clone())));
    list
}

fn block_from(template: &BlockParams, vars: &[Var]) -> BlockParams<Var> {
    let mut it = vars.iter().copied();
    template.map("", &mut |_, _| it.next().expect("one var per tensor"))
}

/// The text-image block with `T=3`, `r=4`, `d=8`, `h=2`.
pub fn incongruity_block_case<'a>(rng: &mut ChaCha8Rng) -> CheckCase<'a> {
    let p = BlockParams::init(rng, 8, 2, 16).expect("valid block");
    // Non-trivial norm parameters so their gradients are exercised too.
    let mut p = p;
    p.norm_gain = random_tensor(rng, vec![8]);
    p.norm_bias = random_tensor(rng, vec![8]);
    p.mlp_in_bias = random_tensor(rng, vec![16]);
    let mut params = vec![
        ("text".to_string(), random_tensor(rng, vec![3, 8])),
        ("regions".to_string(), random_tensor(rng, vec![4, 8])),
    ];
    params.extend(block_list(&p));
    CheckCase {
        params,
        loss: Box::new(move |tape, v| {
            let b = block_from(&p, &v[2..]);
            let tau = incongruity_block(
                tape,
                v[0],
                v[1],
                &b,
                &BlockSettings::default(),
                &mut Dropout::disabled(),
            )
            .map_err(to_tensor_error)?;
            project(tape, tau)
        }),
    }
}

/// Bilinear co-attention with `T=3`, `U=5`, `d=8`.
pub fn coattention_case<'a>(rng: &mut ChaCha8Rng) -> CheckCase<'a> {
    let params = vec![
        ("text".to_string(), random_tensor(rng, vec![3, 8])),
        ("caption".to_string(), random_tensor(rng, vec![5, 8])),
        ("bilinear".to_string(), random_tensor(rng, vec![8, 8])),
    ];
    CheckCase {
        params,
        loss: Box::new(|tape, v| {
            let p = CoAttnParams { bilinear: v[2] };
            let tau = coattention(tape, v[0], v[1], &p)
                .map_err(to_tensor_error)?
                .descriptor;
            project(tape, tau)
        }),
    }
}

/// Toy encoder (vocabulary 10, `d=8`, one layer) on a padded sequence.
pub fn encoder_case<'a>(rng: &mut ChaCha8Rng) -> CheckCase<'a> {
    let p = EncoderParams::init(rng, 10, 8, 2, 16, 1).expect("valid encoder");
    let mut params = Vec::new();
    p.map("encoder", &mut |n, t| {
        params.push((n.to_string(), t.clone()))
    });
    let seq = TokenizedSequence {
        ids: vec![CLS, 5, 3, 5, PAD],
        mask: vec![true, true, true, true, false],
    };
    CheckCase {
        params,
        loss: Box::new(move |tape, v| {
            let mut it = v.iter().copied();
            let e = p.map("", &mut |_, _| it.next().expect("one var per tensor"));
            let out = encode_sequence(
                tape,
                &seq,
                &e,
                &BlockSettings::default(),
                &mut Dropout::disabled(),
            )
            .map_err(to_tensor_error)?;
            project(tape, out)
        }),
    }
}

/// Model configuration used by the full-loss checks.
pub fn small_model_config(variant: Variant) -> ModelConfig {
    let base = ModelConfig {
        d: 8,
        heads: 2,
        regions: 4,
        region_dim: 6,
        reduction: 2,
        l2: 1e-3,
        encoder: EncoderConfig {
            text_len: 4,
            caption_len: 3,
            vocab_size: 10,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    variant.configure(&base)
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> TokenizedSequence {
    let real = rng.random_range(2..=len);
    let ids = (0..len)
        .map(|i| match i {
            0 => CLS,
            i if i < real => rng.random_range(3..vocab),
            _ => PAD,
        })
        .collect();
    TokenizedSequence {
        ids,
        mask: (0..len).map(|i| i < real).collect(),
    }
}

/// Random labelled batch matching `config`.
pub fn random_batch(rng: &mut ChaCha8Rng, config: &ModelConfig, n: usize) -> Vec<ModelInput> {
    let enc = &config.encoder;
    (0..n)
        .map(|i| ModelInput {
            id: format!("check-{i}"),
            text: SequenceInput::Tokens(random_sequence(rng, enc.text_len, enc.vocab_size)),
            caption: Some(SequenceInput::Tokens(random_sequence(
                rng,
                enc.caption_len,
                enc.vocab_size,
            ))),
            regions: Some(random_tensor(rng, vec![config.regions, config.region_dim])),
            label: Some((i % 2) as u8),
        })
        .collect()
}

/// Loss of a batch of 4 for `variant`, checked over every parameter.
pub fn full_model_case<'a>(
    variant: Variant,
    inputs: &'a [ModelInput],
    rng: &mut ChaCha8Rng,
) -> CheckCase<'a> {
    let config = small_model_config(variant);
    let template = build_variant(&config, rng.random()).expect("valid check config");
    let params = flatten(template.named());
    CheckCase {
        params,
        loss: Box::new(move |tape, v| {
            let bound = template.with_slots(v.to_vec()).map_err(to_tensor_error)?;
            let batch: Vec<&ModelInput> = inputs.iter().collect();
            let out = batch_loss(tape, &bound, &config, &batch, &mut Dropout::disabled())
                .map_err(to_tensor_error)?;
            Ok(out.loss)
        }),
    }
}

/// Runs `make` with fresh randomness until the base point is kink-free.
pub fn run_check<F>(name: &str, seed: u64, options: &GradCheckOptions, make: F) -> CheckOutcome
where
    F: for<'a> Fn(&mut ChaCha8Rng, &'a mut Vec<ModelInput>) -> CheckCase<'a>,
{
    let start = Instant::now();
    let mut result = Err(GradCheckError::NearKink { gap: 0.0 });
    let mut attempts = 0;
    while attempts < MAX_ATTEMPTS {
        attempts += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1_000_003 * attempts as u64));
        let mut storage = Vec::new();
        let case = make(&mut rng, &mut storage);
        result = finite_diff_check(&case.loss, &case.params, options);
        if !matches!(result, Err(GradCheckError::NearKink { .. })) {
            break;
        }
    }
    CheckOutcome {
        name: name.to_string(),
        result,
        attempts,
        elapsed: start.elapsed(),
    }
}

/// Every operation, every component and the full loss of all four variants.
pub fn gradcheck_suite(seed: u64, options: &GradCheckOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for (i, (name, shapes, op)) in op_table().into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        out.push(run_check(&format!("op/{name}"), s, options, |rng, _| {
            op_case(&shapes, op, rng)
        }));
    }
    out.push(run_check(
        "module/coordinate_attention",
        seed,
        options,
        |rng, _| coordinate_attention_case(rng),
    ));
    out.push(run_check(
        "module/cross_modal_mha",
        seed,
        options,
        |rng, _| cross_modal_mha_case(rng),
    ));
    out.push(run_check(
        "module/incongruity_block",
        seed,
        options,
        |rng, _| incongruity_block_case(rng),
    ));
    out.push(run_check("module/coattention", seed, options, |rng, _| {
        coattention_case(rng)
    }));
    out.push(run_check("module/encoder", seed, options, |rng, _| {
        encoder_case(rng)
    }));
    for variant in Variant::ALL {
        let name = format!("model/{variant}");
        out.push(run_check(&name, seed, options, |rng, storage| {
            *storage = random_batch(rng, &small_model_config(variant), 4);
            full_model_case(variant, storage, rng)
        }));
    }
    out
}
