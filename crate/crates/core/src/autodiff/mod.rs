//! Dense-tensor reverse-mode automatic differentiation.

mod special;
mod tape;
mod tensor;

pub use special::{digamma, trigamma};
pub use tape::{GradientMap, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Cosine similarity of two equal-length, nonzero vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine: lengths {} and {}", a.len(), b.len())));
    }
    let mut tape = Tape::new();
    let va = tape.constant(Tensor::vector(a.to_vec()));
    let vb = tape.constant(Tensor::vector(b.to_vec()));
    let c = tape.cosine(va, vb)?;
    tape.forward_scalar(c)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest entrywise relative error between two gradients, with `floor`
/// guarding the denominator for near-zero entries.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
