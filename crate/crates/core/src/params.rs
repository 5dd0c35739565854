//! Aggregate system configuration: source, channel, receiver and protocol
//! tuning, plus the hardware presets used by the experiment harness.

use crate::channel::ChannelConfig;
use crate::emitter::EmitterConfig;
use crate::randomness::DecoyRule;
use crate::receiver::DetectorConfig;
use crate::security::LinkBudget;

/// Bob's optical front end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverParams {
    pub data_detector: DetectorConfig,
    pub monitor_detector: DetectorConfig,
    /// Common receiver insertion loss (connectors, WDM, coupler excess)
    /// applied before the 90/10 split, in dB.
    pub insertion_loss_db: f64,
    /// Extra loss of the monitoring interferometer path, in dB.
    pub monitor_path_db: f64,
    /// True sub-slot offset of the detection-window optimum; the tuning
    /// step has to find it.
    pub true_window_offset: f64,
}

impl ReceiverParams {
    pub fn insertion_transmission(&self) -> f64 {
        10f64.powf(-self.insertion_loss_db / 10.0)
    }

    pub fn monitor_path_transmission(&self) -> f64 {
        10f64.powf(-self.monitor_path_db / 10.0)
    }
}

/// Protocol and post-processing tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolParams {
    /// One-way classical-channel latency, seconds.
    pub classical_latency_s: f64,
    /// Slots per simulation batch (one bundle exchange per batch).
    pub batch_slots: u64,
    /// Capacity of Bob's detection FIFO between announce rounds; detections
    /// beyond this are dropped, which is what throttles the short-distance
    /// throughput. `None` models an unbounded buffer.
    pub announce_fifo_capacity: Option<u32>,
    /// Distillation block size in bits (2^13 or 2^14).
    pub block_bits: u32,
    /// One in `sample_inverse` sifted bits is disclosed for QBER estimation
    /// until the first block completes.
    pub sample_inverse: u32,
    /// Safety margin subtracted from every block's output length.
    pub safety_bits: u32,
    /// Error-correction inefficiency applied to h(Q) in rate estimates.
    pub f_ec: f64,
    /// Exchange continues only while the visibility estimate stays at or
    /// above this.
    pub vis_threshold_run: f64,
    /// A wavelength scan must reach this visibility before key exchange
    /// starts or resumes.
    pub vis_threshold_start: f64,
    /// Minimum interfering-position opportunities before the watchdog may
    /// act on a low estimate.
    pub watchdog_min_opportunities: u64,
    /// Minimum non-interfering monitor clicks in the trailing window for the
    /// estimate to count as statistically sufficient.
    pub watchdog_min_ni_clicks: u64,
    /// Trailing window length for the visibility estimate, in announce
    /// rounds.
    pub vis_window_rounds: u32,
    /// Wavelength-tracking controller cadence, in announce rounds.
    pub controller_period_rounds: u32,
    /// Phase dither amplitude used by the tracking controller, radians.
    pub controller_dither_rad: f64,
    pub controller_gain: f64,
    /// Start exchanging even when the initial scan cannot gather enough
    /// monitor counts; blocks are then flagged security-unverified.
    pub allow_unverified_start: bool,
    /// Skip initialization (offsets, window, scan) and start aligned. Used
    /// by rate-comparison runs where initialization is exercised separately.
    pub pre_aligned: bool,
    pub align_pattern_slots: u32,
    pub align_max_lag: u32,
    pub tune_step: f64,
    pub tune_dwell_slots: u64,
    pub scan_points: u32,
    pub scan_dwell_slots: u64,
    pub scan_max_retries: u32,
    /// QBER fed to cascade when no estimate is available yet.
    pub q_fallback: f64,
    /// Pre-shared authentication pool size in bits.
    pub auth_pool_bits: u64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            classical_latency_s: 0.75e-3,
            batch_slots: 65_536,
            announce_fifo_capacity: Some(24),
            block_bits: 8192,
            sample_inverse: 10,
            safety_bits: 30,
            f_ec: 1.15,
            vis_threshold_run: 0.95,
            vis_threshold_start: 0.97,
            watchdog_min_opportunities: 100,
            watchdog_min_ni_clicks: 100,
            vis_window_rounds: 4,
            controller_period_rounds: 8,
            controller_dither_rad: 0.02,
            controller_gain: 0.5,
            allow_unverified_start: true,
            pre_aligned: false,
            align_pattern_slots: 1 << 21,
            align_max_lag: 4096,
            tune_step: 0.05,
            tune_dwell_slots: 200_000,
            scan_points: 17,
            scan_dwell_slots: 2_000_000,
            scan_max_retries: 3,
            q_fallback: 0.05,
            auth_pool_bits: 1 << 26,
        }
    }
}

/// Full physical and protocol configuration of one experiment point.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub emitter: EmitterConfig,
    pub channel: ChannelConfig,
    pub receiver: ReceiverParams,
    pub protocol: ProtocolParams,
    pub decoy_rule: DecoyRule,
    /// Symbols between LFSR reseeds (20 000 = 64 us at 312.5 Mb/s).
    pub reseed_interval_symbols: u64,
    pub seed: u64,
}

impl SystemParams {
    /// Laboratory configuration with free-running InGaAs APDs on both lines.
    pub fn apd_lab(loss_db: f64) -> Self {
        let link = LinkBudget::from_loss_db(loss_db).expect("nonnegative loss");
        SystemParams {
            emitter: EmitterConfig::default(),
            channel: ChannelConfig::new(link),
            receiver: ReceiverParams {
                data_detector: DetectorConfig::apd(),
                monitor_detector: DetectorConfig::apd(),
                insertion_loss_db: 2.5,
                monitor_path_db: 3.0,
                true_window_offset: 0.0,
            },
            protocol: ProtocolParams::default(),
            decoy_rule: DecoyRule::PatternMatch,
            reseed_interval_symbols: 20_000,
            seed: 1,
        }
    }

    /// Field configuration: SSPDs with the polarization penalty folded into
    /// the efficiency and the bias current tuned for low darks.
    pub fn sspd_field(loss_db: f64) -> Self {
        let mut p = Self::apd_lab(loss_db);
        p.receiver.data_detector = DetectorConfig::sspd(0.5);
        p.receiver.monitor_detector = DetectorConfig::sspd(0.5);
        p.receiver.insertion_loss_db = 0.0;
        p.protocol.announce_fifo_capacity = None;
        p
    }

    /// Noiseless reference configuration: unit-efficiency detectors, perfect
    /// extinction and visibility, no throughput limits.
    pub fn ideal(loss_db: f64) -> Self {
        let mut p = Self::apd_lab(loss_db);
        p.emitter.extinction_ratio = f64::INFINITY;
        p.channel.true_visibility = 1.0;
        p.receiver.data_detector = DetectorConfig::ideal();
        p.receiver.monitor_detector = DetectorConfig::ideal();
        p.receiver.insertion_loss_db = 0.0;
        p.receiver.monitor_path_db = 0.0;
        p.protocol.announce_fifo_capacity = None;
        p.protocol.classical_latency_s = 0.0;
        p
    }

    pub fn slot_rate(&self) -> f64 {
        self.emitter.slot_rate
    }

    /// One-way classical latency in whole batches (at least one).
    pub fn latency_batches(&self) -> u64 {
        let slots = (self.protocol.classical_latency_s * self.slot_rate()).round() as u64;
        slots.div_ceil(self.protocol.batch_slots).max(1)
    }

    /// Announce-round cadence in batches (one round per classical
    /// round-trip).
    pub fn announce_period_batches(&self) -> u64 {
        2 * self.latency_batches()
    }

    /// Mean photon number of a full slot at the data detector input.
    pub fn data_full_intensity(&self) -> f64 {
        self.emitter.mu
            * self.channel.link.transmission
            * self.receiver.insertion_transmission()
            * crate::receiver::COUPLER_DATA_FRACTION
    }

    /// Mean photon number of a full slot at the monitor interferometer
    /// input.
    pub fn monitor_full_intensity(&self) -> f64 {
        self.emitter.mu
            * self.channel.link.transmission
            * self.receiver.insertion_transmission()
            * (1.0 - crate::receiver::COUPLER_DATA_FRACTION)
            * self.receiver.monitor_path_transmission()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_quantization() {
        let p = SystemParams::apd_lab(10.0);
        // 0.75 ms at 625 MHz is 468 750 slots = 8 batches of 65 536.
        assert_eq!(p.latency_batches(), 8);
        assert_eq!(p.announce_period_batches(), 16);

        let ideal = SystemParams::ideal(0.0);
        assert_eq!(ideal.latency_batches(), 1);
    }

    #[test]
    fn intensity_chain() {
        let p = SystemParams::ideal(3.0);
        let t = p.channel.link.transmission;
        assert!((p.data_full_intensity() - 0.5 * t * 0.9).abs() < 1e-15);
        let lab = SystemParams::apd_lab(0.0);
        let expect = 0.5 * 10f64.powf(-0.25) * 0.9;
        assert!((lab.data_full_intensity() - expect).abs() < 1e-12);
    }
}
