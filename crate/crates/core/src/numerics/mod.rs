//! Dense tensors, a reverse-mode tape, parameter storage and checkpoints.

pub mod archive;
pub mod gradcheck;
pub mod init;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use archive::{read_archive, write_archive};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;
