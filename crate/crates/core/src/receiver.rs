//! Bob's optics and single-photon detectors.
//!
//! The receiver splits the incoming light 90/10 between the data detector and
//! the monitoring interferometer. Detectors are parameterized by quantum
//! efficiency, dark rate, dead time and afterpulse probability; free-running
//! InGaAs APDs and SSPDs are both presets of the same model.
//!
//! Per slot, a detector produces at most one event. The signal click
//! probability is `1 - exp(-eta * I)` for slot intensity `I`; darks add an
//! independent `dark_rate * slot_period`; afterpulses contribute an
//! exponentially decaying hazard that starts when the dead-time gate of the
//! triggering click expires, with peak value `afterpulse_prob_per_ns`
//! converted to the slot grid.

use std::collections::VecDeque;

use crate::error::DomainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    Apd,
    Sspd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Quantum efficiency (already including any polarization penalty).
    pub efficiency: f64,
    /// Dark counts per second.
    pub dark_rate_cps: f64,
    /// Dead time in seconds.
    pub dead_time_s: f64,
    /// Afterpulse hazard right after dead-time expiry, per nanosecond.
    pub afterpulse_per_ns: f64,
    /// Decay constant of the afterpulse hazard, seconds.
    pub afterpulse_decay_s: f64,
}

impl DetectorConfig {
    /// Free-running InGaAs APD: 10% efficiency, 1e-6 darks/ns, 30 us dead
    /// time keeping afterpulses below 1e-5/ns.
    pub fn apd() -> Self {
        DetectorConfig {
            kind: DetectorKind::Apd,
            efficiency: 0.10,
            dark_rate_cps: 1e3,
            dead_time_s: 30e-6,
            afterpulse_per_ns: 1e-5,
            afterpulse_decay_s: 0.5e-6,
        }
    }

    /// SSPD: low efficiency, very low noise, negligible dead time, no
    /// afterpulsing. `pol_factor` models the polarization sensitivity (0.5 in
    /// the field preset).
    pub fn sspd(pol_factor: f64) -> Self {
        DetectorConfig {
            kind: DetectorKind::Sspd,
            efficiency: 0.025 * pol_factor,
            dark_rate_cps: 9.0,
            dead_time_s: 0.0,
            afterpulse_per_ns: 0.0,
            afterpulse_decay_s: 1e-6,
        }
    }

    /// Ideal noiseless unit-efficiency detector for analytic checks.
    pub fn ideal() -> Self {
        DetectorConfig {
            kind: DetectorKind::Sspd,
            efficiency: 1.0,
            dark_rate_cps: 0.0,
            dead_time_s: 0.0,
            afterpulse_per_ns: 0.0,
            afterpulse_decay_s: 1e-6,
        }
    }

    pub fn dead_slots(&self, slot_rate: f64) -> u64 {
        (self.dead_time_s * slot_rate).ceil() as u64
    }

    /// Per-slot dark probability.
    pub fn dark_per_slot(&self, slot_rate: f64) -> f64 {
        (self.dark_rate_cps / slot_rate).min(1.0)
    }

    /// Afterpulse hazard peak per slot and per-slot decay factor.
    pub fn afterpulse_slot_params(&self, slot_rate: f64) -> (f64, f64) {
        let slot_ns = 1e9 / slot_rate;
        let a0 = self.afterpulse_per_ns * slot_ns;
        let q = if self.afterpulse_decay_s > 0.0 {
            (-1.0 / (self.afterpulse_decay_s * slot_rate)).exp()
        } else {
            0.0
        };
        (a0, q)
    }
}

/// Which output line a detector watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorId {
    Data,
    Monitor,
}

/// Why the simulator generated a click. This is simulation-internal truth:
/// protocol logic never reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cause {
    Signal,
    Dark,
    Afterpulse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    pub slot: u64,
    pub detector: DetectorId,
    pub cause: Cause,
}

/// Mutable per-detector state: the dead-time gate and the pending afterpulse
/// hazard sources (one per recent click, keyed by dead-time expiry slot).
#[derive(Debug, Clone, Default)]
pub struct DetectorState {
    /// First slot allowed to click again.
    pub blocked_until: u64,
    /// Dead-time expiry slots of recent clicks still contributing hazard.
    pub afterpulse_queue: VecDeque<u64>,
    last_slot: Option<u64>,
}

impl DetectorState {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_order(&mut self, slot: u64) -> Result<(), DomainError> {
        if let Some(prev) = self.last_slot {
            if slot <= prev {
                return Err(DomainError::NonMonotoneSlot { prev, next: slot });
            }
        }
        self.last_slot = Some(slot);
        Ok(())
    }

    /// Total afterpulse hazard at `slot`, pruning decayed sources.
    #[inline]
    pub fn afterpulse_hazard(&mut self, slot: u64, a0: f64, q: f64) -> f64 {
        if a0 == 0.0 || self.afterpulse_queue.is_empty() {
            return 0.0;
        }
        let mut keep_alive = 1.0;
        while let Some(&start) = self.afterpulse_queue.front() {
            if slot < start {
                break;
            }
            let h = a0 * q.powi((slot - start) as i32);
            if h < 1e-15 {
                self.afterpulse_queue.pop_front();
                continue;
            }
            keep_alive *= 1.0 - h;
            break;
        }
        // At most two sources can be live given any nonzero dead time; fold
        // the rest conservatively.
        for &start in self.afterpulse_queue.iter().skip(1) {
            if slot >= start {
                let h = a0 * q.powi((slot - start) as i32);
                if h >= 1e-15 {
                    keep_alive *= 1.0 - h;
                }
            }
        }
        1.0 - keep_alive
    }

    fn record_click(&mut self, slot: u64, dead_slots: u64, has_afterpulse: bool) {
        self.blocked_until = slot + dead_slots.max(1);
        if has_afterpulse {
            self.afterpulse_queue.push_back(self.blocked_until);
            if self.afterpulse_queue.len() > 4 {
                self.afterpulse_queue.pop_front();
            }
        }
    }
}

/// Clear the dead-time gate and pending afterpulses.
pub fn reset_detector(state: &mut DetectorState) {
    state.blocked_until = 0;
    state.afterpulse_queue.clear();
}

/// The 90/10 coupler: 90% of the photons go to the data detector, 10% into
/// the monitoring interferometer.
pub const COUPLER_DATA_FRACTION: f64 = 0.9;
pub const COUPLER_MONITOR_FRACTION: f64 = 0.1;

#[inline]
pub fn split(intensity: f64) -> (f64, f64) {
    (
        COUPLER_DATA_FRACTION * intensity,
        COUPLER_MONITOR_FRACTION * intensity,
    )
}

/// Mean photon number at the monitor detector when the interferometer
/// overlaps the pulses of slots `k-1` and `k`. The quarter factors come from
/// the two 50/50 splits of the Michelson path pair.
#[inline]
pub fn monitor_mean(i_prev: f64, i_cur: f64, visibility: f64, phase: f64) -> f64 {
    let mean = (i_prev + i_cur) / 4.0
        - visibility * phase.cos() * (i_prev * i_cur).sqrt() / 2.0;
    mean.max(0.0)
}

/// Combined per-slot click probability from a signal mean, a dark
/// probability, and an afterpulse hazard.
#[inline]
pub fn click_probability(eta: f64, mean_photons: f64, p_dark: f64, p_ap: f64) -> f64 {
    let p_sig = -(-eta * mean_photons).exp_m1();
    1.0 - (1.0 - p_sig) * (1.0 - p_dark) * (1.0 - p_ap)
}

fn detect_common(
    mean_photons: f64,
    slot: u64,
    detector: DetectorId,
    state: &mut DetectorState,
    config: &DetectorConfig,
    slot_rate: f64,
    rng: &mut crate::rng::Rng,
) -> Result<Option<DetectionEvent>, DomainError> {
    state.check_order(slot)?;
    if slot < state.blocked_until {
        return Ok(None);
    }
    let (a0, q) = config.afterpulse_slot_params(slot_rate);
    let p_ap = state.afterpulse_hazard(slot, a0, q);
    let p_dark = config.dark_per_slot(slot_rate);
    let p_sig = -(-config.efficiency * mean_photons).exp_m1();
    let p_total = 1.0 - (1.0 - p_sig) * (1.0 - p_dark) * (1.0 - p_ap);
    if p_total <= 0.0 || !rng.chance(p_total) {
        return Ok(None);
    }
    // Attribute the cause by decomposing the inclusion-exclusion mixture.
    let u = rng.next_f64() * p_total;
    let cause = if u < p_sig {
        Cause::Signal
    } else if u < p_sig + (1.0 - p_sig) * p_dark {
        Cause::Dark
    } else {
        Cause::Afterpulse
    };
    state.record_click(slot, config.dead_slots(slot_rate), a0 > 0.0);
    Ok(Some(DetectionEvent { slot, detector, cause }))
}

/// Data-line detection for one slot.
pub fn detect_data(
    intensity: f64,
    slot: u64,
    state: &mut DetectorState,
    config: &DetectorConfig,
    slot_rate: f64,
    rng: &mut crate::rng::Rng,
) -> Result<Option<DetectionEvent>, DomainError> {
    detect_common(intensity, slot, DetectorId::Data, state, config, slot_rate, rng)
}

/// Monitor-line detection for one slot: the interferometer overlaps the
/// monitor-path intensities of slots `k-1` and `k`.
#[allow(clippy::too_many_arguments)]
pub fn detect_monitor(
    i_prev: f64,
    i_cur: f64,
    visibility: f64,
    phase: f64,
    slot: u64,
    state: &mut DetectorState,
    config: &DetectorConfig,
    slot_rate: f64,
    rng: &mut crate::rng::Rng,
) -> Result<Option<DetectionEvent>, DomainError> {
    let mean = monitor_mean(i_prev, i_cur, visibility, phase);
    detect_common(mean, slot, DetectorId::Monitor, state, config, slot_rate, rng)
}
