//! Reverse-mode gradient tape.
//!
//! Every operation appends one node holding its forward value and the
//! information its backward rule needs. Nodes can only reference earlier
//! nodes, so the node list is already in topological order and `backward`
//! is a single reverse sweep.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }
}

impl FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(TensorError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Spatial axis of a `C×H×W` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    Height,
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GateKind {
    /// `C×H×1`, broadcast along width.
    Height,
    /// `C×1×W`, broadcast along height.
    Width,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Activation(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ReduceMaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        axis: PoolAxis,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GateMul {
        x: Var,
        gate: Var,
        kind: GateKind,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Ln(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    tracked: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Parameters may be borrowed (`'a`) so that registering a large weight
/// matrix costs nothing. A tape is single-threaded; the tensors it borrows
/// can be shared read-only across several tapes on different threads.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    kink_gap: f64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Axis decomposition `outer × extent × inner` of a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_gap: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance, over every relu input and every column max, to a
    /// point where the forward map is not differentiable.
    pub fn kink_gap(&self) -> f64 {
        self.kink_gap
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(TensorError::Dimension {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let out = transpose_raw(self.value(a).data(), m, n);
        self.push("transpose", vec![n, m], out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// `a[m×n] + b[n]`, the bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", a)?;
        let bs = self.shape(b);
        let ok = matches!(*bs, [len] if len == n) || matches!(*bs, [1, len] if len == n);
        if !ok {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: vec![m, n],
                rhs: bs.to_vec(),
            });
        }
        let bias = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias[i % n])
            .collect();
        self.push("add_row", vec![m, n], out, Op::AddRow(a, b), &[a, b])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale(a, c), &[a])
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let x = self.value(a).data();
        let gap = match kind {
            Activation::Relu => x.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min),
            _ => f64::INFINITY,
        };
        let out = x.iter().map(|&v| kind.apply(v)).collect();
        self.kink_gap = self.kink_gap.min(gap);
        let shape = self.shape(a).to_vec();
        self.push(kind.name(), shape, out, Op::Activation(a, kind), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Gelu)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax where columns with `keep[j] == false` receive exactly
    /// zero weight.
    pub fn softmax_rows_masked(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        self.softmax_impl(a, Some(keep))
    }

    fn softmax_impl(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", a)?;
        if n == 0 {
            return Err(TensorError::Dimension {
                op: "softmax_rows",
                msg: "empty row dimension".into(),
            });
        }
        if let Some(keep) = keep {
            if keep.len() != n {
                return Err(TensorError::Shape {
                    op: "softmax_rows_masked",
                    lhs: vec![m, n],
                    rhs: vec![keep.len()],
                });
            }
            if !keep.iter().any(|&k| k) {
                return Err(TensorError::Contract(
                    "softmax mask leaves no column in the row".into(),
                ));
            }
        }
        let kept = |j: usize| keep.is_none_or(|k| k[j]);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| kept(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if kept(j) {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        self.push("softmax_rows", vec![m, n], out, Op::Softmax(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance, then
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.matrix_dims("layer_norm", x)?;
        if d < 2 {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                msg: format!("feature width must be at least 2, got {d}"),
            });
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: vec![m, d],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let nh = (row[j] - mean) * is;
                normalized[i * d + j] = nh;
                out[i * d + j] = g[j] * nh + b[j];
            }
        }
        self.push(
            "layer_norm",
            vec![m, d],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Column-wise maximum of an `m×n` matrix, giving a length-`n` vector.
    /// Ties route the gradient to the first maximal row.
    pub fn reduce_max_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("reduce_max_cols", x)?;
        if m == 0 {
            return Err(TensorError::Dimension {
                op: "reduce_max_cols",
                msg: "no rows to reduce".into(),
            });
        }
        let xs = self.value(x).data();
        let mut argmax = vec![0usize; n];
        let mut out = vec![0.0; n];
        let mut gap = f64::INFINITY;
        for j in 0..n {
            let mut best = 0;
            for i in 1..m {
                if xs[i * n + j] > xs[best * n + j] {
                    best = i;
                }
            }
            argmax[j] = best;
            out[j] = xs[best * n + j];
            let runner_up = (0..m)
                .filter(|&i| i != best)
                .map(|i| xs[i * n + j])
                .fold(f64::NEG_INFINITY, f64::max);
            gap = gap.min(out[j] - runner_up);
        }
        self.kink_gap = self.kink_gap.min(gap);
        self.push(
            "reduce_max_cols",
            vec![n],
            out,
            Op::ReduceMaxCols { x, argmax },
            &[x],
        )
    }

    /// Mean over one spatial axis of a `C×H×W` tensor, keeping it as a
    /// singleton: `C×1×W` for [`PoolAxis::Height`], `C×H×1` for
    /// [`PoolAxis::Width`].
    pub fn avg_pool_axis(&mut self, x: Var, axis: PoolAxis) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => {
                return Err(TensorError::Dimension {
                    op: "avg_pool_axis",
                    msg: format!("expected C×H×W, got {s:?}"),
                })
            }
        };
        let extent = match axis {
            PoolAxis::Height => h,
            PoolAxis::Width => w,
        };
        if extent == 0 {
            return Err(TensorError::Dimension {
                op: "avg_pool_axis",
                msg: "pooled axis has extent 0".into(),
            });
        }
        let xs = self.value(x).data();
        let (shape, out) = match axis {
            PoolAxis::Width => {
                let mut out = vec![0.0; c * h];
                for ci in 0..c {
                    for hi in 0..h {
                        let base = (ci * h + hi) * w;
                        out[ci * h + hi] = xs[base..base + w].iter().sum::<f64>() / w as f64;
                    }
                }
                (vec![c, h, 1], out)
            }
            PoolAxis::Height => {
                let mut out = vec![0.0; c * w];
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            out[ci * w + wi] += xs[(ci * h + hi) * w + wi];
                        }
                    }
                    for wi in 0..w {
                        out[ci * w + wi] /= h as f64;
                    }
                }
                (vec![c, 1, w], out)
            }
        };
        self.push("avg_pool_axis", shape, out, Op::AvgPool { x, axis }, &[x])
    }

    /// Stacks tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::Dimension {
            op: "concat",
            msg: "no tensors to concatenate".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Dimension {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let block = ext * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Dimension {
                op: "slice",
                msg: format!(
                    "range {start}..{} along axis {axis} of {shape:?}",
                    start + len
                ),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            out.extend_from_slice(&xs[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", out_shape, out, Op::Slice { x, axis, start }, &[x])
    }

    /// Row `i` of a matrix as a `1×n` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, 0, i, 1)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).data().to_vec();
        self.push("reshape", shape, out, Op::Reshape(x), &[x])
    }

    /// Multiplies a `C×H×W` map by a `C×H×1` or `C×1×W` gate, broadcasting
    /// over the gate's singleton axis.
    pub fn gate_mul(&mut self, x: Var, gate: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (c, h, w) = match *shape {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TensorError::Dimension {
                    op: "gate_mul",
                    msg: format!("expected C×H×W input, got {shape:?}"),
                })
            }
        };
        let gs = self.shape(gate);
        let kind = if gs == [c, h, 1] {
            GateKind::Height
        } else if gs == [c, 1, w] {
            GateKind::Width
        } else {
            return Err(TensorError::Shape {
                op: "gate_mul",
                lhs: shape,
                rhs: gs.to_vec(),
            });
        };
        let xs = self.value(x).data();
        let g = self.value(gate).data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let k = (ci * h + hi) * w + wi;
                    let gv = match kind {
                        GateKind::Height => g[ci * h + hi],
                        GateKind::Width => g[ci * w + wi],
                    };
                    out[k] = xs[k] * gv;
                }
            }
        }
        self.push(
            "gate_mul",
            shape,
            out,
            Op::GateMul { x, gate, kind },
            &[x, gate],
        )
    }

    /// Selects rows of a `V×d` table, giving `ids.len()×d`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("gather_rows", table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(
            "gather_rows",
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// Natural logarithm; every entry must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::NonFinite { op: "ln" });
        }
        let out = self.value(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push("ln", shape, out, Op::Ln(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("clamp", shape, out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// `x·w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Gradient of the scalar `loss` with respect to every trainable leaf.
    ///
    /// Leaves that do not influence `loss` receive an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.tracked) {
                (Op::Leaf, true) => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(data) => Tensor::new(shape, data).expect("gradient shape"),
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, b, |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                self.accumulate(grads, a, |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |da| add_into(da, g));
                self.accumulate(grads, b, |db| add_into(db, g));
            }
            &Op::AddRow(a, b) => {
                let n = self.shape(a)[1];
                self.accumulate(grads, a, |da| add_into(da, g));
                self.accumulate(grads, b, |db| {
                    for (k, gv) in g.iter().enumerate() {
                        db[k % n] += gv;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |da| {
                    for k in 0..da.len() {
                        da[k] += g[k] * bv[k];
                    }
                });
                self.accumulate(grads, b, |db| {
                    for k in 0..db.len() {
                        db[k] += g[k] * av[k];
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.accumulate(grads, a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            &Op::Sum(a) => {
                self.accumulate(grads, a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            &Op::Activation(a, kind) => {
                let xs = self.value(a).data();
                let ys = out.data();
                self.accumulate(grads, a, |da| {
                    for k in 0..da.len() {
                        da[k] += g[k] * kind.derivative(xs[k], ys[k]);
                    }
                });
            }
            &Op::Softmax(a) => {
                let n = out.shape()[1];
                let ys = out.data();
                self.accumulate(grads, a, |da| {
                    for (r, (yr, gr)) in ys.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                        for j in 0..n {
                            da[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = out.shape()[1];
                let m = out.shape()[0];
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |dg| {
                    for (k, gk) in g.iter().enumerate() {
                        dg[k % d] += gk * normalized[k];
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for (k, gk) in g.iter().enumerate() {
                        db[k % d] += gk;
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..m {
                        let nrow = &normalized[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                        }
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += scale * (d as f64 * dxhat[j] - sum - nrow[j] * dot);
                        }
                    }
                });
            }
            Op::ReduceMaxCols { x, argmax } => {
                let n = argmax.len();
                self.accumulate(grads, *x, |dx| {
                    for (j, &row) in argmax.iter().enumerate() {
                        dx[row * n + j] += g[j];
                    }
                });
            }
            &Op::AvgPool { x, axis } => {
                let (c, h, w) = {
                    let s = self.shape(x);
                    (s[0], s[1], s[2])
                };
                self.accumulate(grads, x, |dx| {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                dx[(ci * h + hi) * w + wi] += match axis {
                                    PoolAxis::Width => g[ci * h + hi] / w as f64,
                                    PoolAxis::Height => g[ci * w + wi] / h as f64,
                                };
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    self.accumulate(grads, v, |dv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            add_into(&mut dv[dst..dst + ext * inner], &g[src..src + ext * inner]);
                        }
                    });
                    offset += ext;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(x), axis);
                let len = out.shape()[axis];
                self.accumulate(grads, x, |dx| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut dx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, |dx| add_into(dx, g));
            }
            &Op::GateMul { x, gate, kind } => {
                let s = self.shape(x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let xs = self.value(x).data();
                let gs = self.value(gate).data();
                let gate_index = |ci: usize, hi: usize, wi: usize| match kind {
                    GateKind::Height => ci * h + hi,
                    GateKind::Width => ci * w + wi,
                };
                self.accumulate(grads, x, |dx| {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let k = (ci * h + hi) * w + wi;
                                dx[k] += g[k] * gs[gate_index(ci, hi, wi)];
                            }
                        }
                    }
                });
                self.accumulate(grads, gate, |dgate| {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let k = (ci * h + hi) * w + wi;
                                dgate[gate_index(ci, hi, wi)] += g[k] * xs[k];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |dx| {
                    for k in 0..dx.len() {
                        dx[k] += g[k] * mask[k];
                    }
                });
            }
            &Op::Ln(x) => {
                let xs = self.value(x).data();
                self.accumulate(grads, x, |dx| {
                    for k in 0..dx.len() {
                        dx[k] += g[k] / xs[k];
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                let xs = self.value(x).data();
                self.accumulate(grads, x, |dx| {
                    for k in 0..dx.len() {
                        if xs[k] >= lo && xs[k] <= hi {
                            dx[k] += g[k];
                        }
                    }
                });
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        contribute: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contribute(slot);
    }
}

/// Gradients of one scalar with respect to every trainable leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for nodes that are not trainable leaves.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds another set of gradients taken on the same tape.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() > other.grads.len() {
            return Err(TensorError::Contract(
                "gradients were taken on different tapes".into(),
            ));
        }
        self.grads.resize(other.grads.len(), None);
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => add_into(a.data_mut(), b.data()),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a[r * n + c];
        }
    }
    out
}
