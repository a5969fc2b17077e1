//! Tensor arithmetic, the gradient tape, Adam, and gradient checking.

mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_update_store, AdamConfig, AdamState};
pub use gradcheck::{grad_check, Fragment, GradCheckConfig, GradCheckReport, OpProbe, PrimitiveOp};
pub use params::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;
