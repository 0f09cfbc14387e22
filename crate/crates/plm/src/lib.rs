//! Three-party private transformer inference over additive secret shares,
//! secure random permutation, and packed-ciphertext private retrieval, with a
//! transport layer that accounts every round and byte under emulated network
//! conditions.
//!
//! Parties: P0 holds the model, P1 holds the inputs and drives generation,
//! P2 is a semi-honest dealer that participates only in the preparation and
//! offline phases. All parties are semi-honest.

pub mod bench;
pub mod error;
pub mod he;
pub mod model;
pub mod perm;
pub mod pir;
pub mod protocols;
pub mod sharing;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
