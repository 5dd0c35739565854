//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the physics and math layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("argument {name} = {value} outside domain {domain}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("LFSR register is zero (absorbing state)")]
    ZeroLfsrState,
    #[error("calibration requires a positive power proxy, got {0}")]
    BadCalibrationInput(f64),
    #[error("detector slots must be processed in increasing order: {prev} then {next}")]
    NonMonotoneSlot { prev: u64, next: u64 },
}

/// Errors raised while encoding or decoding classical-channel bytes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("frame too short: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic byte 0x{0:02x}")]
    BadMagic(u8),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("payload length {0} exceeds limit")]
    Oversized(u32),
    #[error("varint is malformed or overflows u64")]
    BadVarint,
    #[error("payload malformed for {0}")]
    BadPayload(&'static str),
    #[error("slot indices must be strictly increasing")]
    NonMonotoneIndices,
}

/// Errors raised by the protocol state machines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("alignment failed: {0}")]
    AlignmentFailure(&'static str),
    #[error("detection-window tuning failed: no signal in scan")]
    TuningFailure,
    #[error("wavelength scan failed: {0}")]
    ScanFailure(&'static str),
    #[error("classical channel desync: {0}")]
    Desync(&'static str),
    #[error("transport: {0}")]
    Transport(String),
    #[error("session halted: {0}")]
    Halted(&'static str),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

/// Errors raised during key distillation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("QBER estimate {0} outside (0, 0.15]")]
    BadQberEstimate(f64),
    #[error("block verification hash mismatch")]
    VerifyMismatch,
    #[error("Toeplitz seed must be n+m-1 = {expect} bits, got {got}")]
    BadSeedLength { expect: usize, got: usize },
    #[error("authentication key pool exhausted ({need} bits needed, {left} left)")]
    PoolExhausted { need: usize, left: usize },
    #[error("sides disagree on block layout: {0}")]
    LayoutMismatch(&'static str),
}

/// Errors raised by the experiment harness.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("experiment spec invalid: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
