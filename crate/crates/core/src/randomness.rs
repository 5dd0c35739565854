//! Alice's randomness architecture: a slow true-random seed source feeding a
//! fast 32-bit Fibonacci LFSR, and the symbol stream that inserts a decoy
//! whenever the pattern 1010 appears in the raw bit stream.
//!
//! The hardware this models generates logical bits at 312.5 Mb/s from a
//! quantum RNG that only delivers ~4 Mb/s, by reseeding the LFSR with fresh
//! true-random words every 20 000 bits (64 us at line rate).

use crate::error::DomainError;
use crate::rng::Rng;

/// Fallback register value installed when a reseed delivers 0 (the absorbing
/// state of any LFSR).
pub const ZERO_SEED_FALLBACK: u32 = 0xace1_ace1;

/// Default taps (1-indexed bit positions) of the 32-bit maximal-length
/// polynomial x^32 + x^22 + x^2 + x + 1.
pub const DEFAULT_TAPS_32: &[u32] = &[32, 22, 2, 1];

/// Maximal-length taps for the 8-bit reduction used in period tests:
/// x^8 + x^6 + x^5 + x^4 + 1.
pub const TAPS_8: &[u32] = &[8, 6, 5, 4];

/// Fibonacci linear feedback shift register of configurable width <= 32.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LfsrState {
    register: u32,
    width: u32,
    taps_mask: u32,
    bits_since_reseed: u64,
}

impl LfsrState {
    pub fn new(seed: u32, width: u32, taps: &[u32]) -> Result<Self, DomainError> {
        assert!(width >= 2 && width <= 32, "unsupported LFSR width");
        let mask = if width == 32 {
            u32::MAX
        } else {
            (1u32 << width) - 1
        };
        // Tap list (W, a, b, ...) names the polynomial x^W + x^a + x^b + ...
        // + 1. The register shifts right with the output at bit 0, so the
        // recurrence is b[n+W] = xor of b[n+j] over the sub-degree exponents
        // plus the constant term at bit 0.
        let mut taps_mask = 1u32;
        for &t in taps {
            assert!(t >= 1 && t <= width, "tap outside register");
            if t < width {
                taps_mask |= 1 << t;
            }
        }
        let register = seed & mask;
        if register == 0 {
            return Err(DomainError::ZeroLfsrState);
        }
        Ok(LfsrState {
            register,
            width,
            taps_mask,
            bits_since_reseed: 0,
        })
    }

    pub fn new_32(seed: u32) -> Result<Self, DomainError> {
        Self::new(seed, 32, DEFAULT_TAPS_32)
    }

    pub fn register(&self) -> u32 {
        self.register
    }

    pub fn bits_since_reseed(&self) -> u64 {
        self.bits_since_reseed
    }

    /// One Fibonacci step: the shifted-out bit is the output, the feedback
    /// parity of the tapped bits enters at the top.
    #[inline]
    pub fn next_bit(&mut self) -> u8 {
        debug_assert!(self.register != 0);
        let out = (self.register & 1) as u8;
        let fb = (self.register & self.taps_mask).count_ones() & 1;
        self.register = (self.register >> 1) | (fb << (self.width - 1));
        self.bits_since_reseed += 1;
        out
    }

    /// Install a new seed. A zero seed is repaired to [`ZERO_SEED_FALLBACK`];
    /// the caller can observe repairs through the return value.
    pub fn reseed(&mut self, seed: u32) -> ReseedOutcome {
        let mask = if self.width == 32 {
            u32::MAX
        } else {
            (1u32 << self.width) - 1
        };
        let masked = seed & mask;
        self.bits_since_reseed = 0;
        if masked == 0 {
            self.register = ZERO_SEED_FALLBACK & mask;
            ReseedOutcome::RepairedZeroSeed
        } else {
            self.register = masked;
            ReseedOutcome::Applied
        }
    }
}

/// Checked LFSR step for callers holding a possibly-invalid state.
pub fn lfsr_next(state: &mut LfsrState) -> Result<u8, DomainError> {
    if state.register == 0 {
        return Err(DomainError::ZeroLfsrState);
    }
    Ok(state.next_bit())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReseedOutcome {
    Applied,
    RepairedZeroSeed,
}

/// Source of true-random 32-bit seed words: either the deterministic stand-in
/// for the hardware quantum RNG, or a captured word stream replayed from a
/// file (little-endian u32s, consumed one per reseed, cycled on exhaustion).
#[derive(Debug, Clone)]
pub enum SeedSource {
    Generator(Rng),
    Replay { words: Vec<u32>, cursor: usize, wraps: u64 },
}

impl SeedSource {
    pub fn generator(rng: Rng) -> Self {
        SeedSource::Generator(rng)
    }

    /// Parse a raw seed file: a stream of little-endian 32-bit words. A
    /// trailing partial word is rejected.
    pub fn from_replay_bytes(bytes: &[u8]) -> Result<Self, DomainError> {
        if bytes.is_empty() || bytes.len() % 4 != 0 {
            return Err(DomainError::OutOfRange {
                name: "seed_file_len",
                value: bytes.len() as f64,
                domain: "nonempty multiple of 4",
            });
        }
        let words = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(SeedSource::Replay {
            words,
            cursor: 0,
            wraps: 0,
        })
    }

    pub fn next_word(&mut self) -> u32 {
        match self {
            SeedSource::Generator(rng) => rng.next_u32(),
            SeedSource::Replay { words, cursor, wraps } => {
                let w = words[*cursor];
                *cursor += 1;
                if *cursor == words.len() {
                    *cursor = 0;
                    *wraps += 1;
                }
                w
            }
        }
    }
}

/// Logical symbols sent on the quantum channel. A symbol occupies one frame
/// of two consecutive time slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Symbol {
    Bit0 = 0,
    Bit1 = 1,
    Decoy = 2,
}

impl Symbol {
    #[inline]
    pub fn from_u8(v: u8) -> Symbol {
        match v {
            0 => Symbol::Bit0,
            1 => Symbol::Bit1,
            _ => Symbol::Decoy,
        }
    }

    /// Key bit value for data symbols, None for decoys.
    #[inline]
    pub fn bit(self) -> Option<u8> {
        match self {
            Symbol::Bit0 => Some(0),
            Symbol::Bit1 => Some(1),
            Symbol::Decoy => None,
        }
    }
}

/// How decoy positions are selected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecoyRule {
    /// Emit a decoy whenever the last four raw bits equal 1010; the match
    /// window is cleared afterwards, so matches never overlap. Long-run decoy
    /// fraction for unbiased input is exactly 1/20 (mean recurrence time of
    /// the pattern is 2^4 + 2^2 = 20 because 1010 overlaps itself at shift 2).
    PatternMatch,
    /// Direct override for experiments: each symbol is a decoy independently
    /// with this probability, decided by an auxiliary derived stream.
    Probability(f64),
}

impl DecoyRule {
    /// Stationary decoy fraction produced by the rule on unbiased input.
    pub fn expected_fraction(&self) -> f64 {
        match self {
            DecoyRule::PatternMatch => 1.0 / 20.0,
            DecoyRule::Probability(p) => *p,
        }
    }
}

const PATTERN_1010: u32 = 0b1010;

/// The symbol generator: LFSR + reseed schedule + decoy rule.
#[derive(Debug, Clone)]
pub struct SymbolStream {
    lfsr: LfsrState,
    seeds: SeedSource,
    reseed_interval_symbols: u64,
    symbols_since_reseed: u64,
    rule: DecoyRule,
    window: u32,
    window_len: u32,
    aux: Rng,
    pub symbols_emitted: u64,
    pub decoys_emitted: u64,
    pub zero_seed_repairs: u64,
}

impl SymbolStream {
    pub fn new(
        mut seeds: SeedSource,
        reseed_interval_symbols: u64,
        rule: DecoyRule,
        aux: Rng,
    ) -> Self {
        let first = seeds.next_word();
        let mut lfsr = LfsrState::new_32(if first == 0 { ZERO_SEED_FALLBACK } else { first })
            .expect("nonzero seed");
        let mut repairs = 0;
        if first == 0 {
            repairs = 1;
            lfsr.bits_since_reseed = 0;
        }
        SymbolStream {
            lfsr,
            seeds,
            reseed_interval_symbols,
            symbols_since_reseed: 0,
            rule,
            window: 0,
            window_len: 0,
            aux,
            symbols_emitted: 0,
            decoys_emitted: 0,
            zero_seed_repairs: repairs,
        }
    }

    pub fn decoy_rule(&self) -> DecoyRule {
        self.rule
    }

    /// Next symbol. Each raw LFSR bit yields exactly one symbol: the bit
    /// itself, or a decoy when the sliding window matched.
    #[inline]
    pub fn next_symbol(&mut self) -> Symbol {
        if self.reseed_interval_symbols > 0
            && self.symbols_since_reseed == self.reseed_interval_symbols
        {
            let word = self.seeds.next_word();
            if self.lfsr.reseed(word) == ReseedOutcome::RepairedZeroSeed {
                self.zero_seed_repairs += 1;
            }
            self.symbols_since_reseed = 0;
        }
        self.symbols_since_reseed += 1;
        self.symbols_emitted += 1;

        match self.rule {
            DecoyRule::PatternMatch => {
                let bit = self.lfsr.next_bit();
                self.window = ((self.window << 1) | bit as u32) & 0xF;
                if self.window_len < 4 {
                    self.window_len += 1;
                }
                if self.window_len == 4 && self.window == PATTERN_1010 {
                    self.window = 0;
                    self.window_len = 0;
                    self.decoys_emitted += 1;
                    Symbol::Decoy
                } else if bit == 1 {
                    Symbol::Bit1
                } else {
                    Symbol::Bit0
                }
            }
            DecoyRule::Probability(p) => {
                if self.aux.chance(p) {
                    self.decoys_emitted += 1;
                    Symbol::Decoy
                } else if self.lfsr.next_bit() == 1 {
                    Symbol::Bit1
                } else {
                    Symbol::Bit0
                }
            }
        }
    }

    /// Fill a buffer with symbol codes (u8 of [`Symbol`]).
    ///
    /// Bit-exact with repeated [`Self::next_symbol`], but steps the LFSR a
    /// byte at a time and runs the decoy matcher through a precomputed DFA
    /// when the configuration allows it.
    pub fn fill(&mut self, out: &mut [u8]) {
        let mut pos = 0;
        // Byte-parallel feedback is valid when no sub-degree tap reaches
        // into the 8 bits being refilled.
        let fast_ok = self.lfsr.width == 32
            && self.lfsr.taps_mask < (1 << 23)
            && matches!(self.rule, DecoyRule::PatternMatch);
        if fast_ok {
            let table = dfa_table();
            let mut dfa_state = encode_window(self.window, self.window_len);
            while pos + 8 <= out.len() {
                if self.reseed_interval_symbols > 0 {
                    let until = self.reseed_interval_symbols - self.symbols_since_reseed;
                    if until < 8 {
                        break;
                    }
                    if self.symbols_since_reseed == self.reseed_interval_symbols {
                        break;
                    }
                }
                // Emit the low byte and refill the top byte with parallel
                // feedback parities (valid while taps stay below bit 23).
                let s = self.lfsr.register;
                let mut f = 0u32;
                let mut mm = self.lfsr.taps_mask;
                while mm != 0 {
                    let j = mm.trailing_zeros();
                    f ^= s >> j;
                    mm &= mm - 1;
                }
                let byte = (s & 0xFF) as u8;
                self.lfsr.register = (s >> 8) | ((f & 0xFF) << 24);
                self.lfsr.bits_since_reseed += 8;
                let (next, decoy_mask) = table[dfa_state as usize][byte as usize];
                dfa_state = next;
                for i in 0..8 {
                    let bit = (byte >> i) & 1;
                    out[pos + i] = if (decoy_mask >> i) & 1 == 1 { 2 } else { bit };
                }
                self.decoys_emitted += decoy_mask.count_ones() as u64;
                self.symbols_emitted += 8;
                self.symbols_since_reseed += 8;
                pos += 8;
                if self.reseed_interval_symbols > 0
                    && self.symbols_since_reseed == self.reseed_interval_symbols
                {
                    let word = self.seeds.next_word();
                    if self.lfsr.reseed(word) == ReseedOutcome::RepairedZeroSeed {
                        self.zero_seed_repairs += 1;
                    }
                    self.symbols_since_reseed = 0;
                }
            }
            let (w, l) = decode_window(dfa_state);
            self.window = w;
            self.window_len = l;
        }
        for slot in &mut out[pos..] {
            *slot = self.next_symbol() as u8;
        }
    }
}

/// Window-matcher states: lengths 0..=3 with contents, then 16 full windows.
#[inline]
fn encode_window(window: u32, len: u32) -> u8 {
    if len < 4 {
        ((1u32 << len) - 1 + (window & ((1 << len) - 1))) as u8
    } else {
        (15 + (window & 0xF)) as u8
    }
}

#[inline]
fn decode_window(state: u8) -> (u32, u32) {
    let s = state as u32;
    if s < 15 {
        let len = (s + 1).ilog2();
        (s - ((1 << len) - 1), len)
    } else {
        (s - 15, 4)
    }
}

type DfaTable = Vec<[(u8, u8); 256]>;

fn dfa_table() -> &'static DfaTable {
    use std::sync::OnceLock;
    static TABLE: OnceLock<DfaTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = vec![[(0u8, 0u8); 256]; 31];
        for state in 0..31u8 {
            for byte in 0..256usize {
                let (mut window, mut len) = decode_window(state);
                let mut mask = 0u8;
                for i in 0..8 {
                    let bit = ((byte >> i) & 1) as u32;
                    window = ((window << 1) | bit) & 0xF;
                    if len < 4 {
                        len += 1;
                    }
                    if len == 4 && window == PATTERN_1010 {
                        mask |= 1 << i;
                        window = 0;
                        len = 0;
                    }
                }
                table[state as usize][byte] = (encode_window(window, len), mask);
            }
        }
        table
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, Rng};
    use std::collections::HashSet;

    fn stream_from_bits(bits: Vec<u8>) -> impl FnMut() -> Symbol {
        // Drive the window rule directly from a scripted bit sequence.
        let mut window = 0u32;
        let mut len = 0u32;
        let mut iter = bits.into_iter();
        move || {
            let bit = iter.next().expect("script exhausted");
            window = ((window << 1) | bit as u32) & 0xF;
            if len < 4 {
                len += 1;
            }
            if len == 4 && window == PATTERN_1010 {
                window = 0;
                len = 0;
                Symbol::Decoy
            } else if bit == 1 {
                Symbol::Bit1
            } else {
                Symbol::Bit0
            }
        }
    }

    #[test]
    fn eight_bit_reduction_has_period_255() {
        let mut lfsr = LfsrState::new(0x5a, 8, TAPS_8).unwrap();
        let start = lfsr.register();
        let mut seen = HashSet::new();
        let mut period = 0u32;
        loop {
            seen.insert(lfsr.register());
            lfsr.next_bit();
            period += 1;
            if lfsr.register() == start {
                break;
            }
            assert!(period <= 256, "period exceeds state space");
        }
        assert_eq!(period, 255);
        assert_eq!(seen.len(), 255);
    }

    #[test]
    fn default_taps_no_repetition_in_first_million_steps() {
        let mut lfsr = LfsrState::new_32(0x0000_0001).unwrap();
        let mut seen = HashSet::with_capacity(1 << 20);
        for _ in 0..1_000_000u32 {
            assert!(seen.insert(lfsr.register()), "state repeated early");
            lfsr.next_bit();
        }
    }

    #[test]
    fn zero_register_rejected() {
        assert_eq!(
            LfsrState::new_32(0).unwrap_err(),
            DomainError::ZeroLfsrState
        );
        let mut s = LfsrState::new_32(1).unwrap();
        s.register = 0;
        assert!(lfsr_next(&mut s).is_err());
    }

    #[test]
    fn reseed_applies_and_repairs() {
        let mut s = LfsrState::new_32(1).unwrap();
        s.next_bit();
        assert_eq!(s.reseed(0xDEAD_BEEF), ReseedOutcome::Applied);
        assert_eq!(s.register(), 0xDEAD_BEEF);
        assert_eq!(s.bits_since_reseed(), 0);
        assert_eq!(s.reseed(0), ReseedOutcome::RepairedZeroSeed);
        assert_eq!(s.register(), ZERO_SEED_FALLBACK);
    }

    #[test]
    fn reseed_interval_matches_line_rate() {
        // 64 us of symbols at 312.5 Mb/s is exactly 20 000 symbols.
        let interval = (64e-6_f64 * 312.5e6).round() as u64;
        assert_eq!(interval, 20_000);
    }

    #[test]
    fn monobit_balance_for_any_seed() {
        for seed in [1u32, 0xDEAD_BEEF, 0x8000_0000, 12345] {
            let mut lfsr = LfsrState::new_32(seed).unwrap();
            let n = 200_000u64;
            let ones: u64 = (0..n).map(|_| lfsr.next_bit() as u64).sum();
            let bound = 4.0 * ((n / 4) as f64).sqrt();
            assert!(
                ((ones as f64) - (n as f64) / 2.0).abs() < bound,
                "seed {seed:#x}: {ones} ones"
            );
        }
    }

    #[test]
    fn decoy_hand_trace() {
        let mut next = stream_from_bits(vec![1, 0, 1, 0, 1, 1]);
        assert_eq!(next(), Symbol::Bit1);
        assert_eq!(next(), Symbol::Bit0);
        assert_eq!(next(), Symbol::Bit1);
        assert_eq!(next(), Symbol::Decoy);
        // Window cleared: the next bits restart pattern accumulation.
        assert_eq!(next(), Symbol::Bit1);
        assert_eq!(next(), Symbol::Bit1);
    }

    #[test]
    fn all_zero_bits_never_decoy() {
        let mut next = stream_from_bits(vec![0; 64]);
        for _ in 0..64 {
            assert_ne!(next(), Symbol::Decoy);
        }
    }

    #[test]
    fn no_consecutive_decoys() {
        let mut stream = SymbolStream::new(
            SeedSource::generator(Rng::derive(7, streams::ALICE_QRNG)),
            20_000,
            DecoyRule::PatternMatch,
            Rng::derive(7, 0xaa),
        );
        let mut prev_decoy = false;
        for _ in 0..500_000 {
            let s = stream.next_symbol();
            let is_decoy = s == Symbol::Decoy;
            assert!(!(prev_decoy && is_decoy), "consecutive decoys");
            prev_decoy = is_decoy;
        }
    }

    #[test]
    fn decoy_fraction_matches_renewal_rate() {
        // Oracle: the clear-on-match rule is a renewal process whose period
        // is the mean first-occurrence time of 1010 in unbiased bits, which
        // is 2^4 + 2^2 = 20. Check the Monte Carlo rate on true-random input
        // against 1/20 within 3 binomial sigma.
        let mut rng = Rng::from_seed(0xbeef);
        let n = 10_000_000u64;
        let mut window = 0u32;
        let mut len = 0u32;
        let mut decoys = 0u64;
        for _ in 0..n {
            let bit = (rng.next_u64() & 1) as u32;
            window = ((window << 1) | bit) & 0xF;
            if len < 4 {
                len += 1;
            }
            if len == 4 && window == PATTERN_1010 {
                window = 0;
                len = 0;
                decoys += 1;
            }
        }
        let p = 1.0 / 20.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let observed = decoys as f64 / n as f64;
        assert!(
            (observed - p).abs() < 3.0 * sigma,
            "decoy fraction {observed} vs {p} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn stream_decoy_fraction_with_reseeding() {
        let mut stream = SymbolStream::new(
            SeedSource::generator(Rng::derive(99, streams::ALICE_QRNG)),
            20_000,
            DecoyRule::PatternMatch,
            Rng::derive(99, 0xaa),
        );
        let n = 2_000_000u64;
        for _ in 0..n {
            stream.next_symbol();
        }
        let observed = stream.decoys_emitted as f64 / n as f64;
        let sigma = (0.05 * 0.95 / n as f64).sqrt();
        assert!((observed - 0.05).abs() < 4.0 * sigma, "fraction {observed}");
    }

    #[test]
    fn fill_matches_per_symbol_path() {
        let make = |seed| {
            SymbolStream::new(
                SeedSource::generator(Rng::derive(seed, streams::ALICE_QRNG)),
                20_000,
                DecoyRule::PatternMatch,
                Rng::derive(seed, 0xaa),
            )
        };
        for seed in [1u64, 42, 0xDEAD] {
            let mut fast = make(seed);
            let mut slow = make(seed);
            // Odd chunk sizes force both the byte path and the tail path.
            for chunk in [7usize, 64, 1000, 32768, 19_993, 5] {
                let mut buf = vec![0u8; chunk];
                fast.fill(&mut buf);
                for &code in &buf {
                    assert_eq!(code, slow.next_symbol() as u8);
                }
            }
            assert_eq!(fast.symbols_emitted, slow.symbols_emitted);
            assert_eq!(fast.decoys_emitted, slow.decoys_emitted);
        }
    }

    #[test]
    fn identical_seeds_identical_streams() {
        let make = || {
            SymbolStream::new(
                SeedSource::generator(Rng::derive(1234, streams::ALICE_QRNG)),
                20_000,
                DecoyRule::PatternMatch,
                Rng::derive(1234, 0xaa),
            )
        };
        let mut a = make();
        let mut b = make();
        for _ in 0..100_000 {
            assert_eq!(a.next_symbol(), b.next_symbol());
        }
    }

    #[test]
    fn replay_source_round_trips_and_wraps() {
        let words = [1u32, 0xDEAD_BEEF, 7];
        let mut bytes = Vec::new();
        for w in words {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let mut src = SeedSource::from_replay_bytes(&bytes).unwrap();
        for _ in 0..2 {
            for w in words {
                assert_eq!(src.next_word(), w);
            }
        }
        assert!(SeedSource::from_replay_bytes(&bytes[..5]).is_err());
        assert!(SeedSource::from_replay_bytes(&[]).is_err());
    }

    #[test]
    fn probability_rule_override() {
        let mut stream = SymbolStream::new(
            SeedSource::generator(Rng::derive(5, streams::ALICE_QRNG)),
            20_000,
            DecoyRule::Probability(0.125),
            Rng::derive(5, 0xaa),
        );
        let n = 400_000u64;
        for _ in 0..n {
            stream.next_symbol();
        }
        let observed = stream.decoys_emitted as f64 / n as f64;
        let sigma = (0.125 * 0.875 / n as f64).sqrt();
        assert!((observed - 0.125).abs() < 4.0 * sigma);
    }
}
