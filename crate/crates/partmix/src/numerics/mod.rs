//! Deterministic 64-bit numeric substrate: tensors, information-theoretic
//! functions, the finite-difference gradient checker, and Adam.
//!
//! Everything downstream (encoder, losses, mining) builds on these few
//! primitives. All math is `f64` with fixed summation order so repeated runs
//! are bit-identical.

mod adam;
mod gradcheck;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::fd_gradient_check;
pub use ops::{cosine_similarity, kl_divergence, shannon_entropy, softmax, softmax_in_place};
pub use tensor::Tensor;

/// Probabilities are clamped at this floor before logs; one-hot classifier
/// outputs occur after enough training.
pub const PROB_FLOOR: f64 = 1e-12;
