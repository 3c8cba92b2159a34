//! Reliability-aware vertical federated learning.
//!
//! A split model is trained across `K` unreliable feature-holding clients and
//! one label-holding server. Features and embedding widths are allocated in
//! proportion to each client's success probability, and the result is scored
//! per availability pattern against a random-split baseline.

pub mod allocation;
pub mod dataset;
pub mod evaluation;
pub mod experiment;
pub mod matrix;
pub mod nn;
pub mod protocol;
pub mod reliability;
pub mod rng;
pub mod tree;
