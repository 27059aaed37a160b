//! Dense tensors, reverse-mode differentiation, and optimization.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{neg_log_sigmoid, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Guard used by `row_l2_normalize` for (near-)zero rows.
pub const NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests;
