//! Traffic-speed forecasting on a sensor similarity graph built from
//! generated travel trajectories and urban-activity frequencies.
//!
//! The pipeline: parse a directed road network and snap sensors onto it
//! ([`geodata`]), partition the region into a mileage grid and generate
//! travel paths with freeway-cost-weighted A* ([`pathgen`]), combine a
//! Gaussian distance kernel with path co-occurrence into the sensor
//! adjacency ([`graphbuild`]), build weekly activity-frequency embedding
//! inputs ([`activity`]), and train graph-convolutional recurrent or
//! transformer forecasters on top of a small reverse-mode differentiation
//! engine ([`diffengine`], [`models`], [`training`]). [`cli`] wires the
//! stages into the `uagc` binary.

pub mod activity;
pub mod cli;
pub mod diffengine;
pub mod geodata;
pub mod graphbuild;
pub mod models;
pub mod pathgen;
pub mod scalar;
pub mod sparse;
pub mod training;

pub use scalar::Scalar;

/// Default precision of the pipeline: training runs in f64, checkpoints
/// store f32.
pub type Real = f64;

pub type Tensor = diffengine::Tensor<Real>;
pub type Tape = diffengine::Tape<Real>;
pub type ParamStore = diffengine::ParamStore<Real>;
pub type SparseMatrix = sparse::SparseMatrix<Real>;
pub type ActivityTable = activity::ActivityTable<Real>;
