//! Minimal deterministic reverse-mode differentiation engine: dense
//! tensors, a dynamic tape of forward operations, and Adam.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamParams, OptimError, ParamId, ParamStore, Parameter};
pub use tape::{NodeId, SparseOperator, Tape, LAYER_NORM_EPS};
pub use tensor::Tensor;
