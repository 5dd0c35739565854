//! Small statistics helpers: confidence intervals and randomness tests used
//! by the visibility estimator and the key-quality checks.

/// Wilson score interval for a binomial proportion.
///
/// Returns (low, high) at the given z (e.g. 1.96 for 95%).
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Frequency (monobit) test. Returns the p-value.
pub fn monobit_p_value(bits: &[u8]) -> f64 {
    let n = bits.len() as f64;
    let ones = bits.iter().filter(|&&b| b != 0).count() as f64;
    let s = 2.0 * ones - n;
    let stat = s.abs() / n.sqrt();
    erfc(stat / std::f64::consts::SQRT_2)
}

/// Runs test (NIST SP 800-22 style). Returns the p-value, or 0.0 when the
/// monobit precondition fails (proportion too far from 1/2).
pub fn runs_p_value(bits: &[u8]) -> f64 {
    let n = bits.len() as f64;
    if n < 100.0 {
        return 0.0;
    }
    let pi = bits.iter().filter(|&&b| b != 0).count() as f64 / n;
    let tau = 2.0 / n.sqrt();
    if (pi - 0.5).abs() >= tau {
        return 0.0;
    }
    let mut runs = 1u64;
    for w in bits.windows(2) {
        if (w[0] != 0) != (w[1] != 0) {
            runs += 1;
        }
    }
    let v = runs as f64;
    let num = (v - 2.0 * n * pi * (1.0 - pi)).abs();
    let den = 2.0 * (2.0 * n).sqrt() * pi * (1.0 - pi);
    erfc(num / den)
}

/// Complementary error function, Abramowitz & Stegun 7.1.26 with the
/// Numerical Recipes polishing; absolute error below 1.2e-7 which is ample
/// for test significance thresholds.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn wilson_contains_truth() {
        let mut rng = Rng::from_seed(5);
        let p = 0.3;
        let mut covered = 0;
        for _ in 0..200 {
            let n = 500u64;
            let k = (0..n).filter(|_| rng.chance(p)).count() as u64;
            let (lo, hi) = wilson_interval(k, n, 1.96);
            if lo <= p && p <= hi {
                covered += 1;
            }
        }
        assert!(covered >= 180, "coverage too low: {covered}/200");
    }

    #[test]
    fn monobit_accepts_fair_bits() {
        let mut rng = Rng::from_seed(11);
        let bits: Vec<u8> = (0..20_000).map(|_| (rng.next_u64() & 1) as u8).collect();
        assert!(monobit_p_value(&bits) > 0.01);
    }

    #[test]
    fn monobit_rejects_biased_bits() {
        let bits = vec![1u8; 10_000];
        assert!(monobit_p_value(&bits) < 1e-10);
    }

    #[test]
    fn runs_accepts_fair_and_rejects_alternating() {
        let mut rng = Rng::from_seed(13);
        let bits: Vec<u8> = (0..20_000).map(|_| (rng.next_u64() & 1) as u8).collect();
        assert!(runs_p_value(&bits) > 0.01);
        let alternating: Vec<u8> = (0..20_000).map(|i| (i & 1) as u8).collect();
        assert!(runs_p_value(&alternating) < 1e-10);
    }
}
