//! Numeric substrate: tensors with reverse-mode autodiff, a deterministic
//! RNG, the Adam optimizer, and the finite-difference gradient oracle.

pub mod adam;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub use adam::{clip_global_norm, AdamState};
pub use gradcheck::{finite_diff_grad, finite_diff_grad_at, grads_agree, worst_disagreement};
pub use rng::RngState;
pub use tensor::{concat_cols, concat_rows, NoGradGuard, Tensor};
