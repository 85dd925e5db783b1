//! Dense tensors, parameters and reverse-mode differentiation.

mod array;
pub mod gradcheck;
mod param;
mod scalar;
mod tape;

pub use array::Tensor;
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{
    Gradients, Mode, RunningStats, Tape, TripletStats, Var, BN_MOMENTUM, GEM_EPS, NORM_EPS,
};
