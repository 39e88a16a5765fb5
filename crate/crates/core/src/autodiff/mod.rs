//! Dense tensors and a define-by-run reverse-mode gradient tape.

mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use params::{ParamId, ParamStore};
pub use tape::{ElementwiseOp, ReduceOp, Tape, Var};
pub use tensor::Tensor;
