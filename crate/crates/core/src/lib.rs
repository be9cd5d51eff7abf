//! Causal-graph-gated temporal graph neural networks for fire-danger forecasting.
//!
//! The pipeline runs in stages:
//!
//! 1. [`synth`] simulates a structural causal model with slow climate-index
//!    drivers, mediating local weather and rare binary fire labels.
//! 2. [`pcmci`] discovers a lagged causal graph (PC1 condition selection
//!    followed by momentary conditional independence tests, using
//!    partial-correlation tests from [`stats`]).
//! 3. [`graph`] turns the graph into a static weighted adjacency over the
//!    non-target variables.
//! 4. [`models`] encodes every variable's lag window with a shared recurrent
//!    cell, mixes node features with two graph-convolution layers gated by the
//!    adjacency and classifies the pooled graph. Everything is differentiated
//!    by the small reverse-mode engine in [`tensor`].
//! 5. [`train`] and [`metrics`] fit and score the models; [`explain`]
//!    attributes predictions to inputs with Shapley values.
//!
//! [`pipeline`] wires the stages together with file outputs; the `causal-gnn`
//! binary is a thin shell over it.
//!
//! The numeric kernels are generic over [`num::Scalar`] (`f32` or `f64`). The
//! aliases below fix the pipeline's working precision.

pub mod data;
pub mod explain;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod num;
pub mod pcmci;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use num::Scalar;

/// Working precision of the pipeline.
pub type Float = f64;
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type AdjacencyMatrix = graph::AdjacencyMatrix<f64>;
pub type Model = models::Model<f64>;
pub type Batch = models::Batch<f64>;
pub type CiTestResult = stats::CiTestResult<f64>;
