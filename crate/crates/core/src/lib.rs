//! Numerical core of a deterministic federated learning simulator.
//!
//! Everything here is pure computation over in-memory data: parameter
//! vectors, a small MLP with manual backpropagation, Dirichlet non-IID
//! partitioning, the uplink failure model and the server-side aggregation
//! rules (FedAvg, FedHAW hypergradient updates, FedLAW proxy optimization).
//! File IO, timing and orchestration live in the `fedsim` crate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod aggregation;
pub mod comms;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use math::{Layout, LayoutEntry, ParamVec};
pub use rng::RngStream;
