//! Degradation-aware mixture-of-experts image restoration.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`kernels`], [`graph`], [`param`], [`gradcheck`]: dense NHWC
//!   tensors and a tape-based reverse-mode differentiator.
//! * [`blocks`]: channel attention, gated feed-forward, large-kernel
//!   modulation blocks and level transitions.
//! * [`moe`]: router, low-rank specialized/agnostic experts, top-1 dispatch
//!   and the auxiliary routing loss.
//! * [`controller`]: EMA-tracked decoder controllers.
//! * [`model`]: the U-shaped restorer and its checkpoint format.
//! * [`degrade`], [`imageio`]: synthetic clean images and degradations.
//! * [`train`], [`metrics`], [`trace`]: optimization, evaluation and routing
//!   statistics.

// Negated range checks such as `!(x >= 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod checkpoint;
pub mod controller;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod param;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Float, Tensor};
