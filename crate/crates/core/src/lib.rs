//! Training and evaluation engine for a cross-domain mixture-of-experts
//! transformer.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense f64 tensors on a reverse-mode differentiation tape
//! - [`gradcheck`]: finite-difference verification of tape gradients
//! - [`params`]: named parameter storage, initialization, and tape binding
//! - [`attention`]: scaled dot-product attention, multi-head projections,
//!   and transformer encoder/decoder layers
//! - [`experts`]: shared backbone, expert branches, and the query branch
//! - [`model`]: the assembled variants, the combined loss, and prediction
//! - [`data`]: synthetic domain-shifted classification data
//! - [`trainer`]: SGD with momentum, the combined objective, training loops
//! - [`checkpoint`]: byte-stable serialization of training state
//!
//! Everything is deterministic given a seed: data generation, parameter
//! initialization, batch order, and arithmetic all follow fixed iteration
//! orders, so repeated runs produce bit-identical histories.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod experts;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
