//! Dense tensors, a reverse-mode tape, parameters, and FLOP accounting.

pub mod flops;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, sample_coords, Coord, GradCheckReport};
pub use param::{Gradients, ParamId, ParamSet, Parameter};
pub use tape::{Activation, Tape, TapeMode, Var};
pub use tensor::Tensor;
