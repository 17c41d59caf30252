//! Mean-field MDP simulation of collective opinion dynamics.

// `!(x >= 0.0)` style checks are there to reject NaN; index loops mirror
// the row/column algebra of the kernels.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod domain;
pub mod error;
pub mod features;
pub mod ingest;
pub mod labels;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod service;
pub mod simulator;
pub mod summarizer;
pub mod tape;
pub mod transition;

pub use error::{Error, Result};
