//! Small building blocks shared by the model components.

use rand::{Rng, RngCore};
use sarcasm_tensor::{Tape, Tensor, Var};

use crate::error::Result;

/// Joins a parameter-name prefix and a leaf name with a dot.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform matrix: entries in `±sqrt(6 / (rows + cols))`.
pub fn xavier_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches buffer")
}

/// Dropout switch threaded through a forward pass. Disabled dropout is the
/// identity, which makes evaluation deterministic.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn disabled() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, rng: &'r mut dyn RngCore) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => Ok(tape.dropout(x, self.rate, rng)?),
            _ => Ok(x),
        }
    }
}

/// Fixed sinusoidal position table, `len×d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches buffer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = xavier_uniform(&mut rng, 10, 5);
        let bound = (6.0f64 / 15.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn positions_start_with_sin_zero_cos_one() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn disabled_dropout_is_identity() {
        let x = Tensor::ones(vec![4]);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let mut d = Dropout::disabled();
        assert_eq!(d.apply(&mut tape, v).unwrap(), v);
        assert!(!d.is_active());
    }
}
