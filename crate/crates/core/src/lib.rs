//! Secure aggregation for vertical federated learning.
//!
//! One active party (labels plus some features), any number of passive
//! parties grouped into feature clusters, and an aggregator jointly train a
//! vertically partitioned network. Activations and gradients only ever
//! leave a party under pairwise additive masks that cancel in the sum.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod crypto;
pub mod masking;
pub mod model;
pub mod transport;
pub mod data;
pub mod protocol;
pub mod experiment;
pub mod bench;
