//! Parameter initialization and the dense layer shared by the model stages.

use rand::Rng;

use crate::diffnum::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Uniform Glorot initialization for a `fan_in × fan_out` weight.
pub(crate) fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized by construction")
}

/// Inserts `{name}/w` (Glorot) and `{name}/b` (zeros).
pub(crate) fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}/w"), glorot(rng, fan_in, fan_out, 1.0));
    store.insert(format!("{name}/b"), Tensor::zeros(&[1, fan_out]));
}

pub(crate) fn linear(tape: &mut Tape, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{name}/w"))?;
    let b = tape.param(params, &format!("{name}/b"))?;
    tape.linear(x, w, b)
}

pub(crate) const LEAKY_SLOPE: f64 = 0.2;
