//! Minimal dense-tensor engine: row-major tensors, a reverse-mode tape and Adam.
//!
//! Every tensor used by a network is laid out channel-first without a batch
//! axis: `[C, spatial...]` with two or three spatial axes. Scalars have shape
//! `[]`.

mod adam;
mod conv;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, Param};
pub use conv::Padding;
pub use scalar::Scalar;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
