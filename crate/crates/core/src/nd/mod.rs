//! Dense `f64` tensors with reverse-mode differentiation.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{finite_diff_check, finite_diff_check_params, FD_STEP};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
