//! Region projection and coordinate attention over the region grid.
//!
//! Region features arrive as an `r×raw` matrix, one row per cell of a
//! `√r×√r` grid. They are projected to the model width `d`, viewed as `d`
//! channels over the grid, and re-weighted by per-row and per-column
//! sigmoid gates.

use rand::Rng;
use sarcasm_tensor::{Activation, PoolAxis, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::layers::{join, xavier_uniform};

/// 1×1 convolution weights of the coordinate attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordAttnParams<T = Tensor> {
    /// Shared squeeze, `(C/reduction)×C`.
    pub squeeze: T,
    /// Height-branch expand, `C×(C/reduction)`.
    pub expand_h: T,
    /// Width-branch expand, `C×(C/reduction)`.
    pub expand_w: T,
}

impl CoordAttnParams {
    pub fn init(rng: &mut impl Rng, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(CoreError::Config(format!(
                "channel count {channels} is not divisible by reduction {reduction}"
            )));
        }
        let mid = channels / reduction;
        Ok(Self {
            squeeze: xavier_uniform(rng, mid, channels),
            expand_h: xavier_uniform(rng, channels, mid),
            expand_w: xavier_uniform(rng, channels, mid),
        })
    }

    /// All-zero weights; the module then scales its input by exactly 1/4.
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let mid = channels / reduction;
        Self {
            squeeze: Tensor::zeros(vec![mid, channels]),
            expand_h: Tensor::zeros(vec![channels, mid]),
            expand_w: Tensor::zeros(vec![channels, mid]),
        }
    }
}

impl<T> CoordAttnParams<T> {
    pub fn map<'s, U>(
        &'s self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'s T) -> U,
    ) -> CoordAttnParams<U> {
        CoordAttnParams {
            squeeze: f(&join(prefix, "squeeze"), &self.squeeze),
            expand_h: f(&join(prefix, "expand_h"), &self.expand_h),
            expand_w: f(&join(prefix, "expand_w"), &self.expand_w),
        }
    }

    pub fn collect_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
        out.push((join(prefix, "squeeze"), &mut self.squeeze));
        out.push((join(prefix, "expand_h"), &mut self.expand_h));
        out.push((join(prefix, "expand_w"), &mut self.expand_w));
    }
}

/// Projection `L_V` (`raw×d`) and the optional attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualParams<T = Tensor> {
    pub projection: T,
    pub attention: Option<CoordAttnParams<T>>,
}

impl<T> VisualParams<T> {
    pub fn map<'s, U>(
        &'s self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'s T) -> U,
    ) -> VisualParams<U> {
        VisualParams {
            projection: f(&join(prefix, "projection"), &self.projection),
            attention: self
                .attention
                .as_ref()
                .map(|a| a.map(&join(prefix, "attention"), f)),
        }
    }

    pub fn collect_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
        out.push((join(prefix, "projection"), &mut self.projection));
        if let Some(a) = &mut self.attention {
            a.collect_mut(&join(prefix, "attention"), out);
        }
    }
}

/// Side of the square grid holding `regions` cells.
pub fn grid_side(regions: usize) -> Result<usize> {
    let side = (regions as f64).sqrt().round() as usize;
    if regions == 0 || side * side != regions {
        return Err(CoreError::Config(format!(
            "region count {regions} is not a positive perfect square"
        )));
    }
    Ok(side)
}

/// `regions · L_V`.
pub fn project_regions(tape: &mut Tape, regions: Var, projection: Var) -> Result<Var> {
    Ok(tape.matmul(regions, projection)?)
}

/// Views an `r×d` region matrix as `d×√r×√r` (channel-major).
pub fn regions_to_grid(tape: &mut Tape, x: Var) -> Result<Var> {
    let (r, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let side = grid_side(r)?;
    let t = tape.transpose(x)?;
    Ok(tape.reshape(t, vec![d, side, side])?)
}

/// Inverse of [`regions_to_grid`].
pub fn grid_to_regions(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, vec![s[0], s[1] * s[2]])?;
    Ok(tape.transpose(flat)?)
}

/// Output of [`coordinate_attention`] with its gates.
pub struct CoordAttnOutput {
    pub output: Var,
    /// `C×H×1`.
    pub gate_h: Var,
    /// `C×1×W`.
    pub gate_w: Var,
}

/// Coordinate attention on a `C×H×W` map.
pub fn coordinate_attention(
    tape: &mut Tape,
    x: Var,
    params: &CoordAttnParams<Var>,
    activation: Activation,
) -> Result<CoordAttnOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(CoreError::Tensor(sarcasm_tensor::TensorError::Dimension {
            op: "coordinate_attention",
            msg: format!("expected a C×H×W map, got shape {shape:?}"),
        }));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let along_h = tape.avg_pool_axis(x, PoolAxis::Width)?;
    let along_h = tape.reshape(along_h, vec![c, h])?;
    let along_w = tape.avg_pool_axis(x, PoolAxis::Height)?;
    let along_w = tape.reshape(along_w, vec![c, w])?;
    let joined = tape.concat(&[along_h, along_w], 1)?;
    let squeezed = tape.matmul(params.squeeze, joined)?;
    let f = tape.activation(squeezed, activation)?;
    let f_h = tape.slice(f, 1, 0, h)?;
    let f_w = tape.slice(f, 1, h, w)?;
    let g_h = tape.matmul(params.expand_h, f_h)?;
    let g_h = tape.sigmoid(g_h)?;
    let gate_h = tape.reshape(g_h, vec![c, h, 1])?;
    let g_w = tape.matmul(params.expand_w, f_w)?;
    let g_w = tape.sigmoid(g_w)?;
    let gate_w = tape.reshape(g_w, vec![c, 1, w])?;
    let y = tape.gate_mul(x, gate_h)?;
    let output = tape.gate_mul(y, gate_w)?;
    Ok(CoordAttnOutput {
        output,
        gate_h,
        gate_w,
    })
}

/// Stand-in used when visual attention is switched off.
pub fn bypass_attention(x: Var) -> Var {
    x
}

/// Projects regions and applies attention (or the bypass) on the grid,
/// returning `I'` as an `r×d` matrix.
pub fn visual_branch(
    tape: &mut Tape,
    regions: Var,
    params: &VisualParams<Var>,
    activation: Activation,
) -> Result<Var> {
    let projected = project_regions(tape, regions, params.projection)?;
    match &params.attention {
        Some(attn) => {
            let grid = regions_to_grid(tape, projected)?;
            let attended = coordinate_attention(tape, grid, attn, activation)?.output;
            grid_to_regions(tape, attended)
        }
        None => Ok(bypass_attention(projected)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_side_requires_square() {
        assert_eq!(grid_side(49).unwrap(), 7);
        assert!(matches!(grid_side(48), Err(CoreError::Config(_))));
        assert!(grid_side(0).is_err());
    }

    #[test]
    fn grid_round_trip_is_exact() {
        let x = Tensor::new(vec![4, 3], (0..12).map(f64::from).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant_ref(&x);
        let g = regions_to_grid(&mut tape, v).unwrap();
        assert_eq!(tape.shape(g), [3, 2, 2]);
        // channel 1, cell (1, 0) is region 2
        assert_eq!(tape.value(g).at(&[1, 1, 0]), x.at(&[2, 1]));
        let back = grid_to_regions(&mut tape, g).unwrap();
        assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn zero_weights_quarter_the_input() {
        let p = CoordAttnParams::zeros(4, 2);
        let x = Tensor::new(vec![4, 3, 3], (0..36).map(|i| i as f64 - 17.5).collect()).unwrap();
        let mut tape = Tape::new();
        let pv = p.map("", &mut |_, t| tape.param(t));
        let xv = tape.constant_ref(&x);
        let out = coordinate_attention(&mut tape, xv, &pv, Activation::Relu).unwrap();
        for (o, i) in tape.value(out.output).data().iter().zip(x.data()) {
            assert_eq!(*o, 0.25 * i);
        }
    }

    #[test]
    fn bypass_is_identity() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::ones(vec![2, 2, 2]));
        assert_eq!(bypass_attention(v), v);
    }
}
