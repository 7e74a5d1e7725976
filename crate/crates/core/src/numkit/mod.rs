//! Dense fp64 tensors, a reverse-mode tape, and SGD.

pub mod gradcheck;
pub mod io;
mod params;
mod tape;
mod tensor;

pub use params::{init_tensor, param_seed, sgd_step, Init, ParamGrads, ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var, ACOS_EPS, LN_EPS};
pub use tensor::Tensor;

