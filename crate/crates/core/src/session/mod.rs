//! The autonomous protocol state machine for both endpoints.
//!
//! Alice and Bob are independent message-driven machines coupled only by
//! classical-channel frames and the simulated photon stream. Time advances
//! in fixed batches of slots; each batch both endpoints exchange one bundle
//! of frames, and classical latency is modeled by applying a received frame
//! `delta` batches after it was sent. Announcements run on a fixed grid of
//! one round per classical round-trip, which is what couples the classical
//! latency to the short-distance throughput ceiling.

pub mod alice;
pub mod bob;
pub mod engine;
pub mod init;

use crate::stats::wilson_interval;

/// Protocol phase of a session endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionPhase {
    InitAlign,
    InitWindow,
    Exchanging,
    /// Wavelength scan in progress: both the initial scan and watchdog
    /// recoveries.
    Realigning,
    Halted,
}

/// Events recorded in the session log (batch-stamped, identical across
/// transports for identical seeds).
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    PhaseChange { batch: u64, phase: SessionPhase },
    AlignmentFound { batch: u64, offset: u64 },
    WindowTuned { batch: u64, delay: f64, boundary_warning: bool },
    ScanResult { batch: u64, visibility: f64, phase: f64, accepted: bool },
    WatchdogTrip { batch: u64, visibility: f64 },
    BlockFrozen { id: u64, batch: u64, first_slot: u64, last_slot: u64 },
    BlockVerified { id: u64, batch: u64, ok: bool },
    BlockEmitted { id: u64, batch: u64, bits: u32 },
    BlockAborted { id: u64, batch: u64 },
    Desync { batch: u64, reason: &'static str },
    Halt { batch: u64, reason: &'static str },
}

/// Per-window visibility bookkeeping. Monitor positions are classified by
/// the nominal fullness of the two overlapped slots: full-full positions
/// interfere, single-full positions pass one arm, empty-empty positions see
/// only darks and serve as the in-band noise reference.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VisWindow {
    pub int_clicks: u64,
    pub int_opportunities: u64,
    pub ni_clicks: u64,
    pub ni_opportunities: u64,
    pub dark_clicks: u64,
    pub dark_opportunities: u64,
}

impl VisWindow {
    pub fn add(&mut self, other: &VisWindow) {
        self.int_clicks += other.int_clicks;
        self.int_opportunities += other.int_opportunities;
        self.ni_clicks += other.ni_clicks;
        self.ni_opportunities += other.ni_opportunities;
        self.dark_clicks += other.dark_clicks;
        self.dark_opportunities += other.dark_opportunities;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisEstimate {
    pub visibility: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// 99.9% upper bound used by the watchdog: realigning is expensive, so
    /// it takes strong evidence to leave the exchanging state.
    pub ci_high_strict: f64,
    pub sufficient: bool,
    pub int_clicks: u64,
    pub ni_clicks: u64,
    pub int_opportunities: u64,
}

/// Estimate the apparent visibility from exchange-phase monitor counts.
///
/// With x and y the dark-subtracted click rates per interfering and
/// non-interfering opportunity and rho the inverse of the emitter extinction
/// ratio, the small-signal inversion is
///
/// ```text
/// V = (2 y - (1 + rho) x) / (2 y - 2 sqrt(rho) x)
/// ```
///
/// which reduces to `V = 1 - x / (2 y)` for perfect extinction and is
/// consistent (bias vanishes as counts grow) because the non-interfering
/// passthrough level serves as the self-calibrating intensity reference.
pub fn estimate_visibility(
    w: &VisWindow,
    extinction_inverse: f64,
    min_opportunities: u64,
    min_ni_clicks: u64,
) -> VisEstimate {
    let sufficient =
        w.int_opportunities >= min_opportunities && w.ni_clicks >= min_ni_clicks;
    let dark_rate = if w.dark_opportunities > 0 {
        w.dark_clicks as f64 / w.dark_opportunities as f64
    } else {
        0.0
    };
    // Click probabilities saturate as 1 - exp(-mean); invert to mean photon
    // numbers so the estimator stays linear, and note that independent dark
    // counts are additive in log space.
    let to_mean = |rate: f64| -> f64 {
        if rate >= 1.0 {
            f64::INFINITY
        } else {
            -(-rate).ln_1p()
        }
    };
    let solve = |int_rate: f64| -> f64 {
        if w.ni_opportunities == 0 {
            return f64::NAN;
        }
        let ni_rate = w.ni_clicks as f64 / w.ni_opportunities as f64;
        let x = (to_mean(int_rate) - to_mean(dark_rate)).max(0.0);
        let y = to_mean(ni_rate) - to_mean(dark_rate);
        if y <= 0.0 {
            return f64::NAN;
        }
        let rho = extinction_inverse;
        let denom = 2.0 * y - 2.0 * rho.sqrt() * x;
        if denom <= 0.0 {
            return 0.0;
        }
        ((2.0 * y - (1.0 + rho) * x) / denom).clamp(0.0, 1.0)
    };
    let point = if w.int_opportunities > 0 {
        solve(w.int_clicks as f64 / w.int_opportunities as f64)
    } else {
        f64::NAN
    };
    // The interfering-click count dominates the uncertainty; propagate its
    // Wilson interval through the inversion.
    let (lo_rate, hi_rate) = wilson_interval(w.int_clicks, w.int_opportunities.max(1), 1.96);
    let (lo_strict, _) = wilson_interval(w.int_clicks, w.int_opportunities.max(1), 3.29);
    let ci_low = solve(hi_rate);
    let ci_high = solve(lo_rate);
    VisEstimate {
        visibility: point,
        ci_low,
        ci_high,
        ci_high_strict: solve(lo_strict),
        sufficient,
        int_clicks: w.int_clicks,
        ni_clicks: w.ni_clicks,
        int_opportunities: w.int_opportunities,
    }
}

/// One side's aggregate counters for a finished run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counters {
    pub announced: u64,
    pub fifo_dropped: u64,
    pub double_clicks_discarded: u64,
    pub dm_announced: u64,
    pub decoys_removed: u64,
    pub sifted_kept: u64,
    pub sampled: u64,
    pub sample_compared: u64,
    pub sample_mismatches: u64,
    pub blocks_frozen: u64,
    pub blocks_ok: u64,
    pub blocks_rejected: u64,
    pub blocks_aborted: u64,
    pub secret_bits: u64,
    pub scans: u64,
    pub watchdog_trips: u64,
    pub auth_failures: u64,
    /// Parity bits this side disclosed in EC_PARITY frames (reference side
    /// only), audited against block leak accounting.
    pub leak_parity_audit: u64,
    /// Verification-hash bits this side disclosed in AUTH_TAG frames.
    pub leak_hash_audit: u64,
}

#[derive(Debug, Clone)]
pub struct EndpointReport {
    pub counters: Counters,
    pub log: Vec<SessionEvent>,
    /// Kept sifted bits in order (the sacrificed sample bits are excluded).
    pub sifted_stream: Vec<u8>,
    /// Sampled (disclosed) bits in order.
    pub sample_stream: Vec<u8>,
    pub blocks: Vec<crate::distill::KeyBlock>,
    pub final_key: Vec<u8>,
    pub last_vis: Option<VisEstimate>,
    pub qber_estimate: Option<f64>,
    /// Slots spent in the exchanging phase.
    pub exchanging_slots: u64,
    pub total_slots: u64,
    pub halted: Option<&'static str>,
}
