//! Dense `f64` tensors with reverse-mode differentiation, an Adam optimizer,
//! a finite-difference gradient checker and a parameter checkpoint format.

pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, CoordError, GradCheckConfig, GradCheckReport};
pub use params::{Adam, AdamConfig, ParamStore};
pub use tape::{backward, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
