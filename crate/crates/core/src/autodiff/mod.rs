//! Reverse-mode automatic differentiation over dense matrices, Adam, a
//! finite-difference gradient checker and a binary checkpoint format.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use params::{Param, ParamSet, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{DropoutKey, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
