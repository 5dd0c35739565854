//! Closed-form rate predictor.
//!
//! Serves as the analytic oracle against the Monte Carlo session: it derives
//! the expected sifted rate and QBER from the same physical parameters via
//! renewal theory instead of event simulation. Detector clicks form a
//! renewal process whose cycle is the dead time plus a waiting time with
//! hazard `h(d) = 1 - (1 - p_slot)(1 - a q^d)`, where `p_slot` averages the
//! per-slot click probabilities over the stationary slot-class mix (bit-full,
//! bit-empty, decoy) and `a q^d` is the decaying afterpulse hazard. The
//! classical-channel announce schedule, the bounded detection FIFO and the
//! run-end ingestion lag are then replayed on expectations, mirroring the
//! session's bookkeeping exactly.

use crate::params::SystemParams;
use crate::security::{binary_entropy, eve_information};
use crate::session::engine::Schedule;

/// Predicted operating point.
#[derive(Debug, Clone, Copy)]
pub struct RatePrediction {
    /// Expected sifted bits per second (announced, decoys removed,
    /// including the sampled subset).
    pub sifted_rate: f64,
    /// Expected sifted-bit error fraction.
    pub qber: f64,
    /// Secret rate with the ideal error-correction cost h(Q).
    pub secret_rate: f64,
    /// Secret rate with the measured-practice cost f_EC * h(Q).
    pub secret_rate_fec: f64,
    /// Raw detector click rate before protocol accounting, per second.
    pub raw_click_rate: f64,
    /// Dead-time-limited ceiling of the raw click rate, per second.
    pub dead_time_ceiling: f64,
    /// The dead time dominates the renewal cycle.
    pub saturated: bool,
    /// The classical-channel window cap truncates announcements.
    pub capped: bool,
    /// Expected sifted-bit count over the configured horizon.
    pub expected_sifted: f64,
    /// Expected sample comparisons and mismatches over the horizon.
    pub expected_sample_compared: f64,
    pub expected_sample_mismatches: f64,
    /// Secret fraction actually applied to `secret_rate_fec`.
    pub secret_fraction_fec: f64,
}

/// Stationary slot classes as seen by the data detector.
struct ClassMix {
    /// (weight, signal mean photons) per class: bit-full, bit-empty,
    /// decoy-full.
    classes: [(f64, f64); 3],
    p_dark: f64,
}

impl ClassMix {
    fn new(params: &SystemParams) -> Self {
        let f = params.decoy_rule.expected_fraction();
        let full = params.data_full_intensity();
        let empty = full / params.emitter.mu * params.emitter.residual();
        ClassMix {
            classes: [
                ((1.0 - f) / 2.0, full),
                ((1.0 - f) / 2.0, empty),
                (f, full),
            ],
            p_dark: params
                .receiver
                .data_detector
                .dark_per_slot(params.slot_rate()),
        }
    }

    /// Per-slot click probability of class i given an unblocked detector
    /// and no afterpulse hazard.
    fn p_class(&self, i: usize, eta: f64) -> f64 {
        let p_sig = -(-eta * self.classes[i].1).exp_m1();
        1.0 - (1.0 - p_sig) * (1.0 - self.p_dark)
    }
}

/// Renewal statistics of the data-detector click process.
struct Renewal {
    /// Mean and variance of the inter-click gap in slots.
    mean_gap: f64,
    var_gap: f64,
    /// P(click lands in class i), i = bit-full / bit-empty / decoy.
    class_fraction: [f64; 3],
    p_bar: f64,
    dead: f64,
}

fn renewal_stats(params: &SystemParams) -> Renewal {
    let mix = ClassMix::new(params);
    let det = &params.receiver.data_detector;
    let eta = det.efficiency;
    let slot_rate = params.slot_rate();
    let dead = det.dead_slots(slot_rate).max(1) as f64;
    let (a0, q) = det.afterpulse_slot_params(slot_rate);

    let p: [f64; 3] = [
        mix.p_class(0, eta),
        mix.p_class(1, eta),
        mix.p_class(2, eta),
    ];
    let w = [mix.classes[0].0, mix.classes[1].0, mix.classes[2].0];
    let p_bar: f64 = (0..3).map(|i| w[i] * p[i]).sum();

    if p_bar <= 0.0 && a0 <= 0.0 {
        return Renewal {
            mean_gap: f64::INFINITY,
            var_gap: 0.0,
            class_fraction: [0.0; 3],
            p_bar: 0.0,
            dead,
        };
    }

    // Survival loop over the afterpulse window, then a geometric tail.
    let mut survive = 1.0f64;
    let mut e_wait = 0.0f64; // sum of P(W >= k), k >= 1
    let mut e_wait2 = 0.0f64; // sum of (2k - 1) P(W >= k)
    let mut mass = [0.0f64; 3];
    let mut d = 0u64;
    loop {
        let hazard_ap = if a0 > 0.0 { a0 * q.powi(d as i32) } else { 0.0 };
        if hazard_ap < 1e-16 || d > 5_000_000 {
            break;
        }
        let h: f64 = 1.0 - (1.0 - p_bar) * (1.0 - hazard_ap);
        for i in 0..3 {
            mass[i] += survive * w[i] * (1.0 - (1.0 - p[i]) * (1.0 - hazard_ap));
        }
        survive *= 1.0 - h;
        d += 1;
        e_wait += survive;
        e_wait2 += (2 * d - 1) as f64 * survive;
        if survive < 1e-15 {
            break;
        }
    }
    if survive > 0.0 && p_bar > 0.0 {
        // Tail: constant hazard p_bar from delay d on.
        let qg = 1.0 - p_bar;
        // Remaining wait contributions: sum_{j>=1} survive * qg^j etc.,
        // shifted to absolute delays d + j.
        e_wait += survive * qg / p_bar;
        e_wait2 += survive * ((2.0 * d as f64 - 1.0) * qg / p_bar + 2.0 * qg / (p_bar * p_bar));
        for i in 0..3 {
            mass[i] += survive * w[i] * p[i] / p_bar;
        }
    } else if survive > 0.0 {
        // Afterpulse-only process that decayed below cutoff: treat the
        // leftover probability as never clicking.
        let total: f64 = mass.iter().sum();
        if total > 0.0 {
            for m in &mut mass {
                *m /= total;
            }
        }
    }

    let e_w = e_wait;
    let e_w2 = e_wait2;
    let var = (e_w2 - e_w * e_w).max(0.0);
    let total_mass: f64 = mass.iter().sum();
    let frac = if total_mass > 0.0 {
        [mass[0] / total_mass, mass[1] / total_mass, mass[2] / total_mass]
    } else {
        [0.0; 3]
    };
    Renewal {
        mean_gap: dead + e_w,
        var_gap: var,
        class_fraction: frac,
        p_bar,
        dead,
    }
}

/// E[min(N, c)] for N ~ Normal(mean, var): the soft knee of the bounded
/// announce FIFO.
fn capped_mean(mean: f64, var: f64, c: f64) -> f64 {
    if !c.is_finite() {
        return mean;
    }
    if var <= 0.0 {
        return mean.min(c);
    }
    let sd = var.sqrt();
    let z = (c - mean) / sd;
    let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * crate::stats::erfc(-z / std::f64::consts::SQRT_2);
    // E[min(N,c)] = mean - E[(N - c)+] with the Gaussian partial moment.
    let excess = (mean - c) * (1.0 - cdf) + sd * phi;
    (mean - excess).min(c).max(0.0)
}

/// Closed-form expectation of the session's sifted rate, QBER and secret
/// rates for a pre-aligned exchanging run over `n_slots`.
pub fn predict_rates(params: &SystemParams, n_slots: u64) -> RatePrediction {
    let sched = Schedule::from_params(params, n_slots);
    let renewal = renewal_stats(params);
    let slot_rate = params.slot_rate();
    let dead_s = params.receiver.data_detector.dead_time_s;
    let ceiling = if dead_s > 0.0 { 1.0 / dead_s } else { f64::INFINITY };

    let kept_frac = renewal.class_fraction[0] + renewal.class_fraction[1];
    let qber = if kept_frac > 0.0 {
        renewal.class_fraction[1] / kept_frac
    } else {
        0.5
    };

    let click_rate_per_slot = if renewal.mean_gap.is_finite() {
        1.0 / renewal.mean_gap
    } else {
        0.0
    };

    // Replay the announce schedule on expectations: windows close at the
    // announce grid, the FIFO caps each window, ingestion lags by the
    // one-way latency and sampling by three.
    let cap = params
        .protocol
        .announce_fifo_capacity
        .map(|c| c as f64)
        .unwrap_or(f64::INFINITY);
    let sample_inv = params.protocol.sample_inverse as f64;
    let block_bits = params.protocol.block_bits as f64;
    // Sampling stops once the first block freezes, i.e. after
    // block_bits * inv / (inv - 1) kept bits.
    let sampling_stop = (block_bits * sample_inv / (sample_inv - 1.0)).ceil();

    let mut kept_total = 0.0f64;
    let mut sample_compared = 0.0f64;
    let mut capped = false;
    let mut prev_close: u64 = 0; // slots covered by previous windows
    let mut k = 0u64;
    while k < sched.n_batches {
        let close = (k + 1) * sched.batch_slots;
        let span = (close - prev_close) as f64;
        prev_close = close;
        let ingest_ok = k + sched.delta < sched.n_batches;
        let sample_ok = k + 3 * sched.delta < sched.n_batches;
        if ingest_ok {
            let mean_clicks = span * click_rate_per_slot;
            let var_clicks = if renewal.mean_gap.is_finite() {
                span * renewal.var_gap / renewal.mean_gap.powi(3)
            } else {
                0.0
            };
            let processed = capped_mean(mean_clicks, var_clicks, cap);
            if mean_clicks > cap {
                capped = true;
            }
            let kept_before = kept_total;
            let kept_w = processed * kept_frac;
            kept_total += kept_w;
            if sample_ok {
                // Every sample_inv-th kept bit is compared while sampling.
                let s0 = (kept_before.min(sampling_stop)) / sample_inv;
                let s1 = (kept_total.min(sampling_stop)) / sample_inv;
                sample_compared += s1 - s0;
            }
        }
        k += sched.period;
    }

    let duration = sched.total_slots() as f64 / slot_rate;
    let sifted_rate = kept_total / duration;

    let i_ae = eve_information(
        params.emitter.mu,
        params.channel.link.transmission,
        params.channel.true_visibility,
    )
    .unwrap_or(1.0);
    let h = binary_entropy(qber.clamp(0.0, 0.5)).unwrap_or(1.0);
    let r_ideal = (1.0 - h - i_ae).max(0.0);
    let r_fec = (1.0 - params.protocol.f_ec * h - i_ae).max(0.0);

    RatePrediction {
        sifted_rate,
        qber,
        secret_rate: sifted_rate * r_ideal,
        secret_rate_fec: sifted_rate * r_fec,
        raw_click_rate: click_rate_per_slot * slot_rate,
        dead_time_ceiling: ceiling,
        saturated: renewal.p_bar * renewal.dead >= 1.0,
        capped,
        expected_sifted: kept_total,
        expected_sample_compared: sample_compared,
        expected_sample_mismatches: sample_compared * qber,
        secret_fraction_fec: r_fec,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::SystemParams;

    #[test]
    fn apd_detector_saturates_near_ceiling() {
        // Plain APD at 21 dB without the classical throughput cap: the raw
        // click rate must sit at the dead-time ceiling's order (~30 kHz).
        let mut p = SystemParams::apd_lab(21.0);
        p.receiver.insertion_loss_db = 0.0;
        p.protocol.announce_fifo_capacity = None;
        let pred = predict_rates(&p, 10_000_000);
        assert!(pred.saturated);
        assert!(
            pred.raw_click_rate > 0.6 * pred.dead_time_ceiling
                && pred.raw_click_rate <= 1.01 * pred.dead_time_ceiling,
            "raw {} vs ceiling {}",
            pred.raw_click_rate,
            pred.dead_time_ceiling
        );
        assert!((pred.dead_time_ceiling - 33_333.3).abs() < 1.0);
    }

    #[test]
    fn no_signal_limit() {
        // Zero transmission: dark counts only, QBER 1/2, no secret rate.
        let mut p = SystemParams::apd_lab(600.0);
        p.protocol.announce_fifo_capacity = None;
        let pred = predict_rates(&p, 10_000_000);
        assert!((pred.qber - 0.5).abs() < 1e-3, "q = {}", pred.qber);
        assert_eq!(pred.secret_rate, 0.0);
        // Dead time thins the dark process: rate = 1/(tau_dead + 1/d).
        let d = p.receiver.data_detector.dark_rate_cps;
        let thinned = 1.0 / (p.receiver.data_detector.dead_time_s + 1.0 / d);
        assert!(
            (pred.raw_click_rate - thinned).abs() < 0.02 * thinned,
            "raw {} vs thinned darks {thinned}",
            pred.raw_click_rate
        );
    }

    #[test]
    fn sspd_field_secret_rate_order_of_magnitude() {
        let p = SystemParams::sspd_field(43.0);
        let pred = predict_rates(&p, 1_000_000_000);
        assert!(
            pred.secret_rate_fec > 0.25 && pred.secret_rate_fec < 25.0,
            "K = {}",
            pred.secret_rate_fec
        );
        assert!(!pred.saturated);
    }

    #[test]
    fn ideal_channel_is_error_free() {
        let p = SystemParams::ideal(0.0);
        let pred = predict_rates(&p, 1_000_000);
        assert_eq!(pred.qber, 0.0);
        assert!(pred.sifted_rate > 0.0);
    }

    #[test]
    fn capped_mean_limits() {
        assert_eq!(capped_mean(10.0, 0.0, 5.0), 5.0);
        assert_eq!(capped_mean(3.0, 0.0, 5.0), 3.0);
        // Deep in the capped regime the knee saturates (Gaussian tail).
        assert!((capped_mean(50.0, 50.0, 24.0) - 24.0).abs() < 1e-3);
        // Far below the cap nothing is lost.
        assert!((capped_mean(5.0, 5.0, 24.0) - 5.0).abs() < 1e-3);
    }
}
