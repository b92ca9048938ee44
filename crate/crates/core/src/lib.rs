//! Route-level radio map prediction from ground crowdsourced measurements.
//!
//! The crate covers the whole chain: procedural urban scenes, a propagation
//! surrogate producing 3-D RSRP maps, masked/rasterized observations, a
//! dual-transmitter 3-D U-Net trained in three stages (masked pretraining,
//! adversarial feature alignment, decoder-only finetuning), classical
//! baselines and the route RMSE evaluation protocol.

// `!(x < y)` guards deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod datasets;
pub mod eval;
pub mod geoscene;
pub mod grid;
pub mod neural;
pub mod pipeline;
pub mod propsim;
pub mod rng;

pub use grid::GridSpec;
