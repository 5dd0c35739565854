//! Slot-level simulator and classical post-processing engine for a coherent
//! one-way quantum key distribution link.
//!
//! The crate models the full chain: Alice's LFSR-driven symbol source and
//! time-bin encoder, the lossy fiber channel, Bob's 90/10 receiver with
//! physically parameterized single-photon detectors, the autonomous session
//! state machine with pre-sifting and a visibility watchdog, and real-time
//! key distillation (cascade error correction, Toeplitz privacy
//! amplification, information-theoretic message authentication). A
//! closed-form rate predictor cross-validates the Monte Carlo pipeline.

pub mod channel;
pub mod distill;
pub mod emitter;
pub mod error;
pub mod harness;
pub mod params;
pub mod randomness;
pub mod receiver;
pub mod rng;
pub mod security;
pub mod session;
pub mod stats;
pub mod wire;

pub use error::{DistillError, DomainError, HarnessError, SessionError, WireError};
pub use params::SystemParams;
pub use security::predict::{predict_rates, RatePrediction};
pub use security::{
    binary_entropy, db_to_transmission, eve_information, secret_fraction, transmission_to_db,
    LinkBudget, SecurityEstimate,
};
