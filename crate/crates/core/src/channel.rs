//! The quantum channel: linear attenuation, interferometric visibility with
//! optional drift injection, and the beam-splitting tap bookkeeping used to
//! annotate eavesdropping demonstration runs.
//!
//! Loss and visibility fully parameterize the channel. The drift hooks exist
//! to exercise the visibility watchdog: a `VisibilityStep` degrades the true
//! fringe contrast, while a `PhaseStep` models a laser-wavelength jump that
//! the automatic rescan can compensate.

use crate::emitter::SlotIntensity;
use crate::security::LinkBudget;

/// Time-varying perturbation applied to the monitoring interferometer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftSpec {
    None,
    /// True visibility drops by `delta` at `at_seconds` (and stays there).
    VisibilityStep { at_seconds: f64, delta: f64 },
    /// Slow sinusoidal visibility wobble.
    VisibilitySine { amplitude: f64, period_seconds: f64 },
    /// The interference phase acquires a constant offset at `at_seconds`,
    /// e.g. from a wavelength jump. Apparent visibility becomes
    /// `V cos(radians)` until a rescan re-centers the setpoint.
    PhaseStep { at_seconds: f64, radians: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub link: LinkBudget,
    /// True interferometer visibility before drift.
    pub true_visibility: f64,
    pub drift: DriftSpec,
    /// Fraction of the tapped light attributed to a beam-splitting
    /// eavesdropper in demonstration runs; 0 disables the annotation.
    pub bsa_fraction: f64,
    /// Propagation delay of the quantum path relative to the classical
    /// reference, in slots. Discovered by the alignment step.
    pub delay_slots: u64,
    /// Hardware phase of the monitoring interferometer minimum (radians).
    pub phase_offset: f64,
}

impl ChannelConfig {
    pub fn new(link: LinkBudget) -> Self {
        ChannelConfig {
            link,
            true_visibility: 0.98,
            drift: DriftSpec::None,
            bsa_fraction: 0.0,
            delay_slots: 0,
            phase_offset: 0.0,
        }
    }

    /// True visibility at a point in time, clamped to [0, 1].
    pub fn effective_visibility(&self, time_seconds: f64) -> f64 {
        let v = match self.drift {
            DriftSpec::None | DriftSpec::PhaseStep { .. } => self.true_visibility,
            DriftSpec::VisibilityStep { at_seconds, delta } => {
                if time_seconds >= at_seconds {
                    self.true_visibility - delta
                } else {
                    self.true_visibility
                }
            }
            DriftSpec::VisibilitySine { amplitude, period_seconds } => {
                self.true_visibility
                    + amplitude
                        * (2.0 * std::f64::consts::PI * time_seconds / period_seconds).sin()
            }
        };
        v.clamp(0.0, 1.0)
    }

    /// Extra interferometer phase at a point in time (on top of
    /// `phase_offset`).
    pub fn drift_phase(&self, time_seconds: f64) -> f64 {
        match self.drift {
            DriftSpec::PhaseStep { at_seconds, radians } if time_seconds >= at_seconds => radians,
            _ => 0.0,
        }
    }
}

/// Attenuate a slot sequence by the line transmission. Length-preserving and
/// linear in the intensities.
pub fn transmit(slots: &[SlotIntensity], config: &ChannelConfig) -> Vec<SlotIntensity> {
    let t = config.link.transmission;
    slots.iter().map(|&i| i * t).collect()
}

/// Information yield of a beam-splitting attack collecting the light lost in
/// the channel: `mu (1 - t)`.
pub fn bsa_eve_yield(mu: f64, t: f64) -> f64 {
    mu * (1.0 - t)
}
