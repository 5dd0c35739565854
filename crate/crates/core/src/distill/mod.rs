//! Real-time key distillation: cascade error correction with exact leakage
//! accounting, output-length selection from the security bound, Toeplitz
//! privacy amplification, and Wegman-Carter authentication of the
//! distillation traffic.

pub mod auth;
pub mod cascade;
pub mod toeplitz;

pub use auth::{AuthKeyPool, VERIFY_HASH_BITS};
pub use cascade::{cascade_correct, CascadeOutcome, CascadeSide};
pub use toeplitz::{privacy_amplify, ToeplitzSpec};

/// Lifecycle record of one distillation block.
#[derive(Debug, Clone)]
pub struct KeyBlock {
    pub id: u64,
    /// Block size in bits.
    pub n: u32,
    /// QBER estimate fed to cascade.
    pub q_estimate: f64,
    /// Errors cascade actually corrected.
    pub corrections: u32,
    /// Parity plus verification-hash bits disclosed on the classical
    /// channel.
    pub leak_ec: u64,
    pub verified: bool,
    /// Final output length in bits (0 when the bound leaves nothing).
    pub m: u32,
    /// Visibility attributed to this block, and whether the estimate had
    /// sufficient statistics ("security-verified").
    pub visibility: f64,
    pub vis_sufficient: bool,
    /// Slot span the sifted bits came from.
    pub first_slot: u64,
    pub last_slot: u64,
}

/// Output length of a block: `max(0, floor(n (1 - I_AE)) - leak_ec - safety)`.
pub fn compute_output_length(n: u32, leak_ec: u64, i_ae: f64, safety_bits: u32) -> u32 {
    if i_ae >= 1.0 {
        return 0;
    }
    let gross = ((n as f64) * (1.0 - i_ae)).floor() as i64;
    let m = gross - leak_ec as i64 - safety_bits as i64;
    m.max(0) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_cases() {
        assert_eq!(compute_output_length(100, 0, 0.0, 0), 100);
        // 8192 * (1 - 0.5662) = 3553.69 -> 3553, minus 3050 + 30 = 473.
        assert_eq!(compute_output_length(8192, 3050, 0.5662, 30), 473);
        assert_eq!(compute_output_length(8192, 0, 1.0, 0), 0);
        assert_eq!(compute_output_length(8192, 0, 1.5, 0), 0);
        // Leakage larger than the bound clamps at zero.
        assert_eq!(compute_output_length(1024, 5000, 0.1, 30), 0);
    }
}
