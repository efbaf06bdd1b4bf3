//! Tree-structured AllReduce collectives over TCP, and a distributed linear
//! learner built on top of them.
//!
//! The crate has two halves:
//!
//! * **Communication** ([`comm`]): a coordinator ("spanning tree server") that
//!   registers workers and arranges them into a nearly balanced binary tree,
//!   plus a per-node collective endpoint that runs pipelined, chunked
//!   AllReduce over plain TCP sockets. Reduction order is fixed by the tree,
//!   so results are bit-for-bit reproducible.
//! * **Learning** ([`online`], [`averaging`], [`lbfgs`], [`strategy`]): an
//!   adaptive-gradient online pass, confidence-weighted parameter averaging,
//!   a preconditioned L-BFGS batch optimizer whose gradients are aggregated
//!   with AllReduce, and a driver that wires these into several end-to-end
//!   training strategies (hybrid online+batch, repeated online averaging,
//!   pure batch, distributed mini-batch SGD, overcomplete SGD).
//!
//! Supporting modules: [`data`] (text example parsing, feature hashing,
//! dataset sharding), [`metrics`] (auROC / auPRC / NLL and a communication
//! cost model), [`harness`] (a local multi-process cluster with slow-node
//! injection and speculative execution), and [`synth`] (synthetic dataset
//! generation for examples and tests).
//!
//! See the `examples/` directory for one runnable example per major
//! capability, and the `spantree` binary for the command-line interface.

pub mod averaging;
pub mod comm;
pub mod data;
mod error;
pub mod harness;
pub mod lbfgs;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod online;
pub mod strategy;
pub mod synth;

pub use error::{Error, Result};
