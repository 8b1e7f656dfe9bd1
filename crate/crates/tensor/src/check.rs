//! Central-difference verification of tape gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub max_entries: Option<usize>,
    /// The base point is rejected when a relu input or a column-max gap is
    /// closer than this to its kink.
    pub kink_margin: f64,
    /// Seed for choosing the entry subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: Some(64),
            kink_margin: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("base point lies {gap:.3e} from a non-differentiable kink; resample the inputs")]
    NearKink { gap: f64 },
    #[error(
        "gradient mismatch in `{tensor}` at flat index {index}: relative error {rel_error:.3e} exceeds {tolerance:.1e}"
    )]
    Mismatch {
        tensor: String,
        index: usize,
        rel_error: f64,
        tolerance: f64,
    },
}

/// Per-tensor outcome of a check.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    pub kink_gap: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    /// The worst offending entry, if any entry exceeds the tolerance.
    pub fn worst_failure(&self) -> Option<GradCheckError> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_error > self.tolerance)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|t| GradCheckError::Mismatch {
                tensor: t.name.clone(),
                index: t.worst_index,
                rel_error: t.max_rel_error,
                tolerance: self.tolerance,
            })
    }

    pub fn into_result(self) -> Result<Self, GradCheckError> {
        match self.worst_failure() {
            Some(err) => Err(err),
            None => Ok(self),
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<32} entries={:<5} max_rel_err={:.3e}",
                t.name, t.checked, t.max_rel_error
            )?;
        }
        Ok(())
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, one parameter entry at a time.
///
/// `f` receives a fresh tape and one trainable [`Var`] per entry of
/// `params`, in order, and must be deterministic. Parameters are copied onto
/// each tape, so `f` may also record constants borrowed for `'a`.
pub fn finite_diff_check<'a, F>(
    f: F,
    params: &[(String, Tensor)],
    options: &GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError>,
{
    let (analytic, kink_gap) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|(_, t)| tape.param_owned(t.clone()))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.get(v).cloned().expect("parameter gradient"))
            .collect();
        (analytic, tape.kink_gap())
    };
    if kink_gap < options.kink_margin {
        return Err(GradCheckError::NearKink { gap: kink_gap });
    }

    let eval = |work: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|t| tape.param_owned(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss)
            .item()
            .ok_or_else(|| TensorError::Contract("loss is not a scalar".into()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = Vec::with_capacity(params.len());
    let h = options.step;
    for (p, (name, _)) in params.iter().enumerate() {
        let numel = work[p].numel();
        let indices: Vec<usize> = match options.max_entries {
            Some(k) if k < numel => {
                let mut idx = sample(&mut rng, numel, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: f64::NEG_INFINITY,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let original = work[p].data()[i];
            work[p].data_mut()[i] = original + h;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = original - h;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.max_rel_error = check.max_rel_error.max(0.0);
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: options.tolerance,
        kink_gap,
    })
}
