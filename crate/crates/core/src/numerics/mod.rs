//! Dense tensors, reverse-mode gradients, Adam, and a finite-difference
//! gradient verifier.

mod adam;
mod gradcheck;
mod params;
mod seed;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use seed::derive_seed;
pub use params::{Gradients, ParamId, ParameterStore, FORMAT_VERSION};
pub use tape::{logistic, Tape, Var, BCE_EPS};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::{dot, softmax_row};

#[cfg(test)]
mod tests;
