//! Alice's optical source: maps logical symbols to per-slot mean photon
//! numbers. A symbol is a pair of slots; bit 1 puts the pulse in the first
//! slot, bit 0 in the second, and a decoy fills both. "Empty" slots carry a
//! residual `mu / extinction_ratio` because the intensity modulator has
//! finite extinction.

use crate::error::DomainError;
use crate::randomness::Symbol;

/// Mean photon number in a single time slot.
pub type SlotIntensity = f64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitterConfig {
    /// Mean photons per non-empty pulse.
    pub mu: f64,
    /// Optical slot rate in Hz; the logical bit rate is half of this.
    pub slot_rate: f64,
    /// Intensity ratio between a full and an "empty" slot. `f64::INFINITY`
    /// models a perfect modulator.
    pub extinction_ratio: f64,
    /// Optical pulse width in seconds; informational only at slot-level
    /// granularity.
    pub pulse_width: f64,
}

impl Default for EmitterConfig {
    fn default() -> Self {
        EmitterConfig {
            mu: 0.5,
            slot_rate: 625e6,
            extinction_ratio: 1000.0,
            pulse_width: 300e-12,
        }
    }
}

impl EmitterConfig {
    pub fn bit_rate(&self) -> f64 {
        self.slot_rate / 2.0
    }

    pub fn slot_period(&self) -> f64 {
        1.0 / self.slot_rate
    }

    /// Residual intensity of a nominally empty slot.
    #[inline]
    pub fn residual(&self) -> f64 {
        if self.extinction_ratio.is_infinite() {
            0.0
        } else {
            self.mu / self.extinction_ratio
        }
    }

    /// Intensity of the two slots of a symbol frame.
    #[inline]
    pub fn slot_pair(&self, symbol: Symbol) -> (SlotIntensity, SlotIntensity) {
        let r = self.residual();
        match symbol {
            Symbol::Bit0 => (r, self.mu),
            Symbol::Bit1 => (self.mu, r),
            Symbol::Decoy => (self.mu, self.mu),
        }
    }

    /// Intensity of one slot given the frame symbol and the slot parity
    /// (0 = first slot of the frame).
    #[inline]
    pub fn slot_intensity(&self, symbol: Symbol, parity: u64) -> SlotIntensity {
        let (a, b) = self.slot_pair(symbol);
        if parity == 0 {
            a
        } else {
            b
        }
    }

    /// Whether the slot nominally carries a pulse.
    #[inline]
    pub fn slot_is_full(symbol: Symbol, parity: u64) -> bool {
        match symbol {
            Symbol::Bit0 => parity == 1,
            Symbol::Bit1 => parity == 0,
            Symbol::Decoy => true,
        }
    }
}

/// One encoded symbol frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolFrame {
    pub symbol: Symbol,
    pub slots: (SlotIntensity, SlotIntensity),
    pub slot_period: f64,
}

/// Encode a symbol into its two-slot intensity frame.
pub fn encode_symbol(symbol: Symbol, config: &EmitterConfig) -> SymbolFrame {
    SymbolFrame {
        symbol,
        slots: config.slot_pair(symbol),
        slot_period: config.slot_period(),
    }
}

/// Serialize a symbol sequence onto the global slot timeline. Slot `i` of
/// frame `k` lands at global slot `2k + i`. Returns the slot intensities and
/// the frame log Alice retains for sifting.
pub fn frame_stream(symbols: &[Symbol], config: &EmitterConfig) -> (Vec<SlotIntensity>, Vec<Symbol>) {
    let mut slots = Vec::with_capacity(symbols.len() * 2);
    for &s in symbols {
        let (a, b) = config.slot_pair(s);
        slots.push(a);
        slots.push(b);
    }
    (slots, symbols.to_vec())
}

/// Reconstruct the symbol sequence from a slot timeline produced by
/// [`frame_stream`]. Used to check that the frame log and the timeline stay
/// consistent.
pub fn frames_from_slots(slots: &[SlotIntensity], config: &EmitterConfig) -> Vec<Symbol> {
    let threshold = (config.mu + config.residual()) / 2.0;
    slots
        .chunks_exact(2)
        .map(|pair| match (pair[0] > threshold, pair[1] > threshold) {
            (false, true) => Symbol::Bit0,
            (true, false) => Symbol::Bit1,
            _ => Symbol::Decoy,
        })
        .collect()
}

/// Scale factor mapping a measured raw intensity onto the target mean photon
/// number, as set on the variable attenuator during calibration.
pub fn calibrate_attenuation(
    target_mu: f64,
    measured_power_proxy: f64,
) -> Result<f64, DomainError> {
    if !(measured_power_proxy > 0.0) {
        return Err(DomainError::BadCalibrationInput(measured_power_proxy));
    }
    Ok(target_mu / measured_power_proxy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomness::{DecoyRule, SeedSource, SymbolStream};
    use crate::rng::{streams, Rng};

    #[test]
    fn encoding_rules() {
        let mut cfg = EmitterConfig::default();
        cfg.extinction_ratio = f64::INFINITY;
        let f = encode_symbol(Symbol::Bit1, &cfg);
        assert_eq!(f.slots, (0.5, 0.0));
        let f = encode_symbol(Symbol::Decoy, &cfg);
        assert_eq!(f.slots, (0.5, 0.5));

        let cfg = EmitterConfig::default();
        let f = encode_symbol(Symbol::Bit0, &cfg);
        assert!((f.slots.0 - 0.0005).abs() < 1e-15);
        assert_eq!(f.slots.1, 0.5);
    }

    #[test]
    fn frame_stream_composition() {
        let cfg = EmitterConfig::default();
        let (slots, log) = frame_stream(&[Symbol::Bit0], &cfg);
        assert_eq!(log, vec![Symbol::Bit0]);
        assert!((slots[0] - 0.0005).abs() < 1e-15);
        assert_eq!(slots[1], 0.5);

        let (slots, _) = frame_stream(&[], &cfg);
        assert!(slots.is_empty());

        let (slots, _) = frame_stream(&[Symbol::Bit1, Symbol::Decoy], &cfg);
        assert_eq!(slots.len(), 4);
        assert_eq!(slots[0], 0.5);
        assert!((slots[1] - 0.0005).abs() < 1e-15);
        assert_eq!(slots[2], 0.5);
        assert_eq!(slots[3], 0.5);
    }

    #[test]
    fn timeline_roundtrip_is_lossless() {
        let cfg = EmitterConfig::default();
        let mut stream = SymbolStream::new(
            SeedSource::generator(Rng::derive(3, streams::ALICE_QRNG)),
            20_000,
            DecoyRule::PatternMatch,
            Rng::derive(3, 0xaa),
        );
        let symbols: Vec<Symbol> = (0..10_000).map(|_| stream.next_symbol()).collect();
        let (slots, log) = frame_stream(&symbols, &cfg);
        assert_eq!(frames_from_slots(&slots, &cfg), log);
    }

    #[test]
    fn mean_photons_per_symbol() {
        let cfg = EmitterConfig::default();
        let mut stream = SymbolStream::new(
            SeedSource::generator(Rng::derive(21, streams::ALICE_QRNG)),
            20_000,
            DecoyRule::PatternMatch,
            Rng::derive(21, 0xaa),
        );
        let n = 1_000_000u64;
        let mut total = 0.0;
        for _ in 0..n {
            let (a, b) = cfg.slot_pair(stream.next_symbol());
            total += a + b;
        }
        let mean = total / n as f64;
        // mu (1 + decoy_fraction) plus the extinction residual of bit frames.
        let f = 1.0 / 20.0;
        let expect = cfg.mu * (1.0 + f) + (1.0 - f) * cfg.residual();
        // Per-symbol spread is dominated by the decoy indicator (mu per hit).
        let sigma_per = cfg.mu * (f * (1.0 - f)).sqrt();
        let bound = 3.0 * sigma_per / (n as f64).sqrt();
        assert!(
            (mean - expect).abs() < bound,
            "mean {mean} expect {expect} bound {bound}"
        );
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_attenuation(0.5, 5.0).unwrap(), 0.1);
        assert_eq!(calibrate_attenuation(0.5, 0.5).unwrap(), 1.0);
        assert!(calibrate_attenuation(0.5, 0.0).is_err());
        // Idempotent: applying the returned scale yields the target, and a
        // second calibration at the target returns 1.
        let s = calibrate_attenuation(0.5, 5.0).unwrap();
        assert_eq!(calibrate_attenuation(0.5, 5.0 * s).unwrap(), 1.0);
    }
}
