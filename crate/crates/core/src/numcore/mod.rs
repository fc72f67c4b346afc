//! Minimal differentiable numerics: dense tensors, a reverse-mode tape, the
//! layers the imputation model needs, finite-difference verification and
//! Adam.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use layers::positional_encoding;
pub use params::{adam_step, AdamConfig, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
