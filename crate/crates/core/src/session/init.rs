//! Initialization steps: slot-offset identification by cross-correlation,
//! detection-window tuning, and the wavelength scan that locates the fringe
//! minimum and measures the interferometer visibility.

use crate::error::SessionError;
use crate::rng::Rng;

/// Generate the public alignment pattern: one bool per slot (true = pulse).
/// Both sides derive it from the seed carried in the SYNC_PATTERN frame. The
/// pattern is built frame-wise (each frame is a random data symbol) so the
/// emitter can actually produce it.
pub fn alignment_pattern(seed: u32, slots: usize) -> Vec<bool> {
    let symbols = alignment_symbols(seed, slots.div_ceil(2));
    let mut out = Vec::with_capacity(slots);
    for s in symbols {
        out.push(s == crate::randomness::Symbol::Bit1);
        if out.len() < slots {
            out.push(s == crate::randomness::Symbol::Bit0);
        }
    }
    out.truncate(slots);
    out
}

/// Frame symbols of the alignment pattern.
pub fn alignment_symbols(seed: u32, frames: usize) -> Vec<crate::randomness::Symbol> {
    let mut rng = Rng::from_seed(seed as u64 ^ 0xa11c_e0ff);
    (0..frames)
        .map(|_| {
            if rng.next_u64() & 1 == 1 {
                crate::randomness::Symbol::Bit1
            } else {
                crate::randomness::Symbol::Bit0
            }
        })
        .collect()
}

/// Find the lag that best explains the detections as samples of the pattern.
///
/// `detections` are raw receiver slot indices; the pattern occupies sender
/// slots `0..pattern.len()`. Returns the lag maximizing the correlation
/// score. Fails when there is no signal at all or when the two best lags
/// score within 1% of each other.
pub fn align_offsets(
    pattern: &[bool],
    detections: &[u64],
    max_lag: u64,
) -> Result<u64, SessionError> {
    if pattern.len() < 1024 {
        return Err(SessionError::AlignmentFailure("pattern shorter than 1024 slots"));
    }
    if detections.is_empty() {
        return Err(SessionError::AlignmentFailure("no detections"));
    }
    let mut best = (0i64, 0u64);
    let mut second = 0i64;
    for lag in 0..=max_lag {
        // Score = hits on pulse slots minus hits on empty slots, so that a
        // uniform dark background scores zero in expectation.
        let mut score = 0i64;
        for &d in detections {
            if d < lag {
                continue;
            }
            let idx = (d - lag) as usize;
            if let Some(&full) = pattern.get(idx) {
                score += if full { 1 } else { -1 };
            }
        }
        if score > best.0 {
            second = best.0;
            best = (score, lag);
        } else if score > second {
            second = score;
        }
    }
    if best.0 <= 0 {
        return Err(SessionError::AlignmentFailure("no correlation peak"));
    }
    if second > 0 && (best.0 - second) as f64 <= 0.01 * best.0 as f64 {
        return Err(SessionError::AlignmentFailure("ambiguous correlation peak"));
    }
    Ok(best.1)
}

/// Result of a detection-window scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowTune {
    pub delay: f64,
    /// The maximum sat on the scan boundary (monotone response).
    pub boundary_warning: bool,
}

/// Pick the sub-slot delay maximizing the data-line count rate over a scan.
pub fn tune_window(scan: &[(f64, u64)]) -> Result<WindowTune, SessionError> {
    if scan.is_empty() || scan.iter().all(|&(_, c)| c == 0) {
        return Err(SessionError::TuningFailure);
    }
    let (best_idx, &(delay, _)) = scan
        .iter()
        .enumerate()
        .max_by_key(|(_, &(_, c))| c)
        .map(|(i, p)| (i, p))
        .unwrap();
    Ok(WindowTune {
        delay,
        boundary_warning: best_idx == 0 || best_idx == scan.len() - 1,
    })
}

/// Detection efficiency factor of a mistuned window. Flat curvature around
/// the optimum keeps a within-one-step tune lossless in practice.
#[inline]
pub fn window_gain(delay: f64, true_offset: f64) -> f64 {
    let d = ((delay - true_offset) / 0.5).abs().min(2.0);
    (1.0 - 0.3 * d * d).max(0.0)
}

/// One dwell of the wavelength scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub phase: f64,
    pub clicks: u64,
    pub slots: u64,
    pub int_opportunities: u64,
    pub ni_opportunities: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringeFit {
    /// Phase of the fringe minimum.
    pub phi0: f64,
    pub visibility: f64,
    /// Fitted mean monitor rate per slot at the fringe midpoint.
    pub scale: f64,
}

/// Least-squares fringe fit `rate(phi) = A + B cos phi + C sin phi` over the
/// scan, with the dark level taken from a separate vacuum dwell and the
/// constant non-interfering background removed analytically.
pub fn fit_fringe(
    dark_clicks: u64,
    dark_slots: u64,
    points: &[ScanPoint],
    min_clicks: u64,
) -> Result<FringeFit, SessionError> {
    if points.len() < 4 {
        return Err(SessionError::ScanFailure("too few scan points"));
    }
    let total: u64 = points.iter().map(|p| p.clicks).sum();
    if total < min_clicks {
        return Err(SessionError::ScanFailure("insufficient counts"));
    }
    let to_mean = |rate: f64| -> f64 {
        if rate >= 1.0 {
            f64::INFINITY
        } else {
            -(-rate).ln_1p()
        }
    };
    let dark_rate = if dark_slots > 0 {
        to_mean(dark_clicks as f64 / dark_slots as f64)
    } else {
        0.0
    };
    // Normal equations for the three-parameter linear model on per-slot
    // mean photon numbers (click rates are log-inverted so the fringe top
    // does not sag from detector saturation; darks stay additive).
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for p in points {
        let y = to_mean(p.clicks as f64 / p.slots.max(1) as f64);
        let basis = [1.0, p.phase.cos(), p.phase.sin()];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += basis[i] * basis[j];
            }
            rhs[i] += basis[i] * y;
        }
    }
    let slots_total: f64 = points.iter().map(|p| p.slots as f64).sum();
    let rho_int: f64 = points.iter().map(|p| p.int_opportunities as f64).sum::<f64>() / slots_total;
    let rho_ni: f64 = points.iter().map(|p| p.ni_opportunities as f64).sum::<f64>() / slots_total;
    let rho_00 = (1.0 - rho_int - rho_ni).max(0.0);

    // The measured y is -ln E_c[exp(-m_c)] + dark, but the linear model
    // wants E_c[m_c] + dark: the class mixture makes the aggregate rate
    // saturate faster than any single class. Fit, then subtract the
    // model-implied mixture error and refit; two rounds converge.
    let mut corrections = vec![0.0f64; points.len()];
    let mut fit = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..3 {
        let mut m2 = m;
        let mut rhs2 = rhs;
        // Apply corrections to the right-hand side only: basis is unchanged.
        for (p, &e) in points.iter().zip(&corrections) {
            let basis = [1.0, p.phase.cos(), p.phase.sin()];
            for i in 0..3 {
                rhs2[i] -= basis[i] * e;
            }
        }
        let _ = &mut m2;
        let sol = solve3(m2, rhs2).ok_or(SessionError::ScanFailure("degenerate scan grid"))?;
        fit = (sol[0], sol[1], sol[2]);
        let (a, b, c) = fit;
        let amplitude = (b * b + c * c).sqrt();
        let signal = a - dark_rate;
        if signal <= 0.0 {
            return Err(SessionError::ScanFailure("no light above noise"));
        }
        let kappa = signal / (rho_int / 2.0 + rho_ni / 4.0);
        let v = (2.0 * amplitude / (kappa * rho_int)).clamp(0.0, 1.0);
        let phi0 = (-c).atan2(-b);
        for (j, p) in points.iter().enumerate() {
            let m_ff = kappa * (1.0 - v * (p.phase - phi0).cos()) / 2.0;
            let m_ni = kappa / 4.0;
            let mix = rho_int * (-m_ff).exp() + rho_ni * (-m_ni).exp() + rho_00;
            let linear = kappa * (rho_int * (1.0 - v * (p.phase - phi0).cos()) / 2.0
                + rho_ni / 4.0);
            corrections[j] = -mix.ln() - linear;
        }
    }
    let (a, b, c) = fit;
    let amplitude = (b * b + c * c).sqrt();
    let signal = a - dark_rate;
    let kappa = signal / (rho_int / 2.0 + rho_ni / 4.0);
    let visibility = (2.0 * amplitude / (kappa * rho_int)).clamp(0.0, 1.0);
    // rate(phi) has its minimum where cos(phi - phi0) = +1 in the
    // interference term convention 1 - V cos(phi - phi0): the fitted B, C
    // satisfy B = -kv cos(phi0), C = -kv sin(phi0).
    let phi0 = (-c).atan2(-b);
    Ok(FringeFit {
        phi0,
        visibility,
        scale: signal,
    })
}

fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap()
        })?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..3 {
            if row == col {
                continue;
            }
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    Some([b[0] / m[0][0], b[1] / m[1][1], b[2] / m[2][2]])
}
