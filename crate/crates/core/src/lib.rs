//! Link-level simulator for grant-free random access in Massive MIMO OFDM.

pub mod airlink;
pub mod analytics;
pub mod channel;
pub mod codebook;
pub mod estimator;
pub mod harness;
pub mod numerics;
pub mod protocol;
