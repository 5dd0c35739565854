//! Cascade error reconciliation.
//!
//! Four passes with pass-1 block size `k1 = max(1, ceil(0.73 / q))`, doubling
//! each pass. Pass 1 runs on the natural bit order; passes 2-4 run on uniform
//! shuffles derived from seeds the reference side announces. Mismatched
//! blocks are bisected by parity exchanges; every correction toggles the
//! parity of the containing block in every other pass, and blocks that turn
//! odd are re-searched (the cascade step).
//!
//! The exchange is round-based so a transport can interleave it with the
//! rest of the session: each round the reference side (Alice) discloses the
//! parities of the current query intervals and the correcting side (Bob)
//! answers with his, from which both sides derive the next interval set
//! deterministically. Leakage counts Alice's disclosed parity bits; Bob's
//! answers reveal only the error syndrome relative to them.

use crate::rng::Rng;

pub const PASSES: usize = 4;

/// Pass-1 block size from the QBER estimate. A zero estimate with actual
/// errors still terminates because later passes shuffle, but it is flagged.
pub fn initial_block_size(n: usize, q_estimate: f64) -> (usize, bool) {
    if q_estimate <= 0.0 {
        return ((n / 4).max(1), true);
    }
    let k = (0.73 / q_estimate).ceil() as usize;
    (k.clamp(1, n), false)
}

/// One query interval in a pass's permuted order; `lo..hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Interval {
    pass: usize,
    lo: usize,
    hi: usize,
}

impl Interval {
    fn len(&self) -> usize {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Waiting to run the top-level parity round of a pass.
    TopCheck(usize),
    /// Bisecting the current interval set (all from one pass).
    Searching,
    Done,
}

/// Control state shared (by construction) between the two sides: everything
/// in here is a deterministic function of the public transcript.
#[derive(Debug, Clone)]
pub struct Control {
    n: usize,
    block_sizes: [usize; PASSES],
    perms: Vec<Vec<u32>>,
    /// Original index -> permuted position, per pass.
    inv_perms: Vec<Vec<u32>>,
    /// Per checked pass: current parity-mismatch flag per block (excluding
    /// blocks being searched right now).
    odd: Vec<Vec<bool>>,
    checked: [bool; PASSES],
    intervals: Vec<Interval>,
    phase: Phase,
    /// Bits Bob flipped (original indices), in discovery order.
    pub corrections: Vec<u32>,
    /// Parity bits disclosed by the reference side so far.
    pub leak_parity_bits: u64,
    pub rounds: u32,
    pub fallback_block_size: bool,
}

impl Control {
    pub fn new(n: usize, q_estimate: f64, shuffle_seeds: &[u64; PASSES - 1]) -> Self {
        let (k1, fallback) = initial_block_size(n, q_estimate);
        let mut block_sizes = [0usize; PASSES];
        block_sizes[0] = k1;
        for p in 1..PASSES {
            block_sizes[p] = (block_sizes[p - 1] * 2).min(n);
        }
        let mut perms: Vec<Vec<u32>> = Vec::with_capacity(PASSES);
        perms.push((0..n as u32).collect());
        for seed in shuffle_seeds {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            Rng::from_seed(*seed).shuffle(&mut perm);
            perms.push(perm);
        }
        let inv_perms = perms
            .iter()
            .map(|perm| {
                let mut inv = vec![0u32; n];
                for (pos, &orig) in perm.iter().enumerate() {
                    inv[orig as usize] = pos as u32;
                }
                inv
            })
            .collect();
        let odd = (0..PASSES)
            .map(|p| vec![false; n.div_ceil(block_sizes[p])])
            .collect();
        Control {
            n,
            block_sizes,
            perms,
            inv_perms,
            odd,
            checked: [false; PASSES],
            intervals: Vec::new(),
            phase: Phase::TopCheck(0),
            corrections: Vec::new(),
            leak_parity_bits: 0,
            rounds: 0,
            fallback_block_size: fallback,
        }
    }

    pub fn perm(&self, pass: usize) -> &[u32] {
        &self.perms[pass]
    }

    fn blocks_of_pass(&self, pass: usize) -> usize {
        self.n.div_ceil(self.block_sizes[pass])
    }

    fn block_span(&self, pass: usize, block: usize) -> Interval {
        let k = self.block_sizes[pass];
        Interval {
            pass,
            lo: block * k,
            hi: ((block + 1) * k).min(self.n),
        }
    }

    pub fn done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// 1-based pass currently being worked (0 once done); used as the wire
    /// tag of parity rounds.
    pub fn current_pass(&self) -> u8 {
        match self.phase {
            Phase::TopCheck(p) => p as u8 + 1,
            Phase::Searching => self.intervals.first().map_or(0, |iv| iv.pass as u8 + 1),
            Phase::Done => 0,
        }
    }

    /// Record a corrected bit: toggle the containing block's flag in every
    /// checked pass except `skip_pass` (whose block is accounted by the
    /// search that produced the flip).
    fn note_flip(&mut self, bit: u32, skip_pass: usize) {
        self.corrections.push(bit);
        for p in 0..PASSES {
            if !self.checked[p] || p == skip_pass {
                continue;
            }
            let pos = self.inv_perms[p][bit as usize] as usize;
            let b = pos / self.block_sizes[p];
            self.odd[p][b] = !self.odd[p][b];
        }
    }

    /// Intervals whose parities are exchanged this round: either all blocks
    /// of the pass being top-checked, or the left half of every active
    /// search interval.
    pub fn query_intervals(&self) -> Vec<(usize, usize, usize)> {
        match self.phase {
            Phase::TopCheck(p) => (0..self.blocks_of_pass(p))
                .map(|b| {
                    let s = self.block_span(p, b);
                    (s.pass, s.lo, s.hi)
                })
                .collect(),
            Phase::Searching => self
                .intervals
                .iter()
                .map(|iv| {
                    let mid = iv.lo + iv.len() / 2;
                    (iv.pass, iv.lo, mid)
                })
                .collect(),
            Phase::Done => Vec::new(),
        }
    }

    /// Advance with this round's mismatch mask (reference parity xor
    /// correcting parity, one bit per query interval). Returns the original
    /// indices of the bits corrected this round.
    pub fn advance(&mut self, mismatch: &[u8]) -> Vec<u32> {
        self.rounds += 1;
        self.leak_parity_bits += mismatch.len() as u64;
        let mut flips = Vec::new();
        match self.phase {
            Phase::Done => {}
            Phase::TopCheck(p) => {
                assert_eq!(mismatch.len(), self.blocks_of_pass(p));
                self.checked[p] = true;
                for (b, &m) in mismatch.iter().enumerate() {
                    self.odd[p][b] = m != 0;
                }
            }
            Phase::Searching => {
                assert_eq!(mismatch.len(), self.intervals.len());
                let current = std::mem::take(&mut self.intervals);
                for (iv, &m) in current.iter().zip(mismatch) {
                    let mid = iv.lo + iv.len() / 2;
                    let narrowed = if m != 0 {
                        Interval { pass: iv.pass, lo: iv.lo, hi: mid }
                    } else {
                        Interval { pass: iv.pass, lo: mid, hi: iv.hi }
                    };
                    if narrowed.len() == 1 {
                        let bit = self.perms[narrowed.pass][narrowed.lo];
                        self.note_flip(bit, narrowed.pass);
                        flips.push(bit);
                    } else {
                        self.intervals.push(narrowed);
                    }
                }
            }
        }
        self.schedule();
        flips
    }

    /// Pick the next work: keep searching, spawn searches for odd blocks of
    /// the lowest checked pass, or top-check the next pass.
    fn schedule(&mut self) {
        loop {
            if !self.intervals.is_empty() {
                self.phase = Phase::Searching;
                return;
            }
            let mut spawned = false;
            for p in 0..PASSES {
                if !self.checked[p] {
                    continue;
                }
                let odd_blocks: Vec<usize> = self.odd[p]
                    .iter()
                    .enumerate()
                    .filter_map(|(b, &o)| o.then_some(b))
                    .collect();
                if odd_blocks.is_empty() {
                    continue;
                }
                for b in odd_blocks {
                    self.odd[p][b] = false;
                    let span = self.block_span(p, b);
                    if span.len() == 1 {
                        // Single-bit block: the mismatch is that bit.
                        let bit = self.perms[p][span.lo];
                        self.note_flip(bit, p);
                    } else {
                        self.intervals.push(span);
                    }
                }
                spawned = true;
                break;
            }
            if spawned {
                // Single-bit corrections may have re-oddened other passes;
                // loop to re-evaluate (terminates: corrections are finite).
                continue;
            }
            for p in 0..PASSES {
                if !self.checked[p] {
                    self.phase = Phase::TopCheck(p);
                    return;
                }
            }
            self.phase = Phase::Done;
            return;
        }
    }
}

/// Permuted-order parity of one side's bits over an interval.
#[inline]
pub fn interval_parity(bits: &[u8], perm: &[u32], lo: usize, hi: usize) -> u8 {
    let mut acc = 0u8;
    for &idx in &perm[lo..hi] {
        acc ^= bits[idx as usize];
    }
    acc & 1
}

/// One side of the exchange: owns its bit string and a control replica.
#[derive(Debug, Clone)]
pub struct CascadeSide {
    pub bits: Vec<u8>,
    pub control: Control,
    /// Whether this side applies corrections (Bob) or is the reference
    /// (Alice).
    corrects: bool,
}

impl CascadeSide {
    pub fn reference(bits: Vec<u8>, q: f64, seeds: &[u64; PASSES - 1]) -> Self {
        let control = Control::new(bits.len(), q, seeds);
        CascadeSide { bits, control, corrects: false }
    }

    pub fn correcting(bits: Vec<u8>, q: f64, seeds: &[u64; PASSES - 1]) -> Self {
        let control = Control::new(bits.len(), q, seeds);
        CascadeSide { bits, control, corrects: true }
    }

    /// Parities of this round's query intervals.
    pub fn round_parities(&self) -> Vec<u8> {
        self.control
            .query_intervals()
            .iter()
            .map(|&(p, lo, hi)| interval_parity(&self.bits, self.control.perm(p), lo, hi))
            .collect()
    }

    /// Consume both parity vectors for the round and advance.
    pub fn absorb_round(&mut self, mine: &[u8], theirs: &[u8]) {
        let mismatch: Vec<u8> = mine.iter().zip(theirs).map(|(a, b)| a ^ b).collect();
        let flips = self.control.advance(&mismatch);
        if self.corrects {
            for &bit in &flips {
                self.bits[bit as usize] ^= 1;
            }
        }
    }

    pub fn done(&self) -> bool {
        self.control.done()
    }
}

/// Outcome of a locally driven correction.
#[derive(Debug, Clone)]
pub struct CascadeOutcome {
    pub corrected: Vec<u8>,
    /// Parity bits disclosed by the reference side.
    pub leak_parity_bits: u64,
    pub corrections: usize,
    pub rounds: u32,
    pub fallback_block_size: bool,
}

/// Run the full exchange in-memory (the session drives the same state
/// machines over the classical channel instead).
pub fn cascade_correct(
    alice_bits: &[u8],
    bob_bits: &[u8],
    q_estimate: f64,
    shuffle_seeds: &[u64; PASSES - 1],
) -> CascadeOutcome {
    assert_eq!(alice_bits.len(), bob_bits.len());
    let mut alice = CascadeSide::reference(alice_bits.to_vec(), q_estimate, shuffle_seeds);
    let mut bob = CascadeSide::correcting(bob_bits.to_vec(), q_estimate, shuffle_seeds);
    while !alice.done() {
        let a_par = alice.round_parities();
        let b_par = bob.round_parities();
        alice.absorb_round(&a_par, &b_par);
        bob.absorb_round(&b_par, &a_par);
        debug_assert_eq!(alice.done(), bob.done());
    }
    CascadeOutcome {
        corrected: bob.bits,
        leak_parity_bits: alice.control.leak_parity_bits,
        corrections: alice.control.corrections.len(),
        rounds: alice.control.rounds,
        fallback_block_size: alice.control.fallback_block_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::security::binary_entropy;

    fn random_pair(rng: &mut Rng, n: usize, q: f64) -> (Vec<u8>, Vec<u8>, usize) {
        let alice: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
        let mut bob = alice.clone();
        let mut errors = 0;
        for b in bob.iter_mut() {
            if rng.chance(q) {
                *b ^= 1;
                errors += 1;
            }
        }
        (alice, bob, errors)
    }

    fn seeds(rng: &mut Rng) -> [u64; 3] {
        [rng.next_u64(), rng.next_u64(), rng.next_u64()]
    }

    #[test]
    fn zero_error_block_discloses_only_structure() {
        let mut rng = Rng::from_seed(60);
        let (alice, _, _) = random_pair(&mut rng, 1024, 0.0);
        let bob = alice.clone();
        let out = cascade_correct(&alice, &bob, 0.05, &seeds(&mut rng));
        assert_eq!(out.corrected, alice);
        assert_eq!(out.corrections, 0);
        // Only the four top-check rounds happen; leakage is the block-count
        // parities of each pass.
        let mut expect = 0u64;
        let (k1, _) = initial_block_size(1024, 0.05);
        let mut k = k1;
        for _ in 0..PASSES {
            expect += 1024u64.div_ceil(k as u64);
            k = (k * 2).min(1024);
        }
        assert_eq!(out.leak_parity_bits, expect);
        assert_eq!(out.rounds, 4);
    }

    #[test]
    fn corrects_all_errors_at_five_percent() {
        let mut rng = Rng::from_seed(61);
        for _ in 0..20 {
            let (alice, bob, _) = random_pair(&mut rng, 8192, 0.05);
            let out = cascade_correct(&alice, &bob, 0.05, &seeds(&mut rng));
            assert_eq!(out.corrected, alice, "residual errors");
        }
    }

    #[test]
    fn leakage_within_efficiency_bound_at_five_percent() {
        let mut rng = Rng::from_seed(62);
        let n = 8192usize;
        let bound = 1.3 * n as f64 * binary_entropy(0.05).unwrap();
        for _ in 0..10 {
            let (alice, bob, _) = random_pair(&mut rng, n, 0.05);
            let out = cascade_correct(&alice, &bob, 0.05, &seeds(&mut rng));
            assert_eq!(out.corrected, alice);
            assert!(
                (out.leak_parity_bits as f64) <= bound,
                "leak {} > bound {bound}",
                out.leak_parity_bits
            );
        }
    }

    #[test]
    fn high_error_blocks_mostly_converge() {
        let mut rng = Rng::from_seed(63);
        let mut ok = 0;
        for _ in 0..30 {
            let (alice, bob, _) = random_pair(&mut rng, 8192, 0.11);
            let out = cascade_correct(&alice, &bob, 0.11, &seeds(&mut rng));
            if out.corrected == alice {
                ok += 1;
            }
        }
        assert!(ok >= 29, "only {ok}/30 converged at Q=11%");
    }

    #[test]
    fn zero_estimate_falls_back() {
        // k1 = n/4 is a coarse last resort: the run must terminate with the
        // fallback flagged, and every flip it does make must be a real
        // error. Residuals, if any, are the verification hash's job.
        let mut rng = Rng::from_seed(64);
        let (alice, bob, errors) = random_pair(&mut rng, 1024, 0.02);
        assert!(errors > 0);
        let initial: usize = alice.iter().zip(&bob).filter(|(a, b)| a != b).count();
        let out = cascade_correct(&alice, &bob, 0.0, &seeds(&mut rng));
        assert!(out.fallback_block_size);
        let residual: usize = alice
            .iter()
            .zip(&out.corrected)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(residual + out.corrections, initial);
        assert!(residual % 2 == 0, "odd residual would have been searched");
    }

    #[test]
    fn corrections_count_errors_exactly() {
        // A flip only happens on a size-1 interval with odd mismatch, i.e.
        // a genuine difference, so corrections == hamming distance whenever
        // correction succeeds.
        let mut rng = Rng::from_seed(65);
        for _ in 0..10 {
            let (alice, bob, _) = random_pair(&mut rng, 4096, 0.05);
            let distance = alice.iter().zip(&bob).filter(|(a, b)| a != b).count();
            let out = cascade_correct(&alice, &bob, 0.05, &seeds(&mut rng));
            assert_eq!(out.corrected, alice);
            assert_eq!(out.corrections, distance);
        }
    }

    #[test]
    fn misestimated_qber_still_converges() {
        let mut rng = Rng::from_seed(66);
        let (alice, bob, _) = random_pair(&mut rng, 4096, 0.08);
        // Estimate off by a factor of two in both directions.
        for q_est in [0.04, 0.15] {
            let out = cascade_correct(&alice, &bob, q_est, &seeds(&mut rng));
            assert_eq!(out.corrected, alice);
        }
    }
}
