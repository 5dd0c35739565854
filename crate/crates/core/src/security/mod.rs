//! Security bound and rate arithmetic for the coherent one-way link.
//!
//! The eavesdropper information bound combines the beam-splitting term
//! `mu * (1 - t)` with an intercept-resend term driven by the monitoring
//! interferometer visibility:
//!
//! ```text
//! I_AE(mu, t, V) = mu (1 - t) + (1 - V) (1 + e^-mu) / (2 e^-mu)
//! ```
//!
//! The secret fraction is `r = max(0, 1 - h(Q) - I_AE)` and the secret rate
//! is `K = R * r` for sifted rate `R`. Everything here is a pure function of
//! its arguments; the closed-form rate predictor lives in [`predict`].

pub mod predict;

use crate::error::DomainError;

/// Default fiber attenuation in dB/km used to translate distances to loss.
pub const DEFAULT_ATTENUATION_DB_PER_KM: f64 = 0.21;

/// Link loss expressed both as dB and as a linear transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub loss_db: f64,
    /// Linear transmission, `10^(-loss_db / 10)`.
    pub transmission: f64,
    /// Equivalent fiber length for the configured attenuation coefficient.
    pub fiber_km: f64,
    pub attenuation_db_per_km: f64,
}

impl LinkBudget {
    pub fn from_loss_db(loss_db: f64) -> Result<Self, DomainError> {
        Self::from_loss_db_with_attenuation(loss_db, DEFAULT_ATTENUATION_DB_PER_KM)
    }

    pub fn from_loss_db_with_attenuation(
        loss_db: f64,
        alpha: f64,
    ) -> Result<Self, DomainError> {
        if !(loss_db >= 0.0) {
            return Err(DomainError::OutOfRange {
                name: "loss_db",
                value: loss_db,
                domain: "[0, inf)",
            });
        }
        Ok(LinkBudget {
            loss_db,
            transmission: db_to_transmission(loss_db)?,
            fiber_km: if alpha > 0.0 { loss_db / alpha } else { 0.0 },
            attenuation_db_per_km: alpha,
        })
    }

    pub fn from_fiber_km(km: f64, alpha: f64) -> Result<Self, DomainError> {
        if !(km >= 0.0) {
            return Err(DomainError::OutOfRange {
                name: "fiber_km",
                value: km,
                domain: "[0, inf)",
            });
        }
        Self::from_loss_db_with_attenuation(km * alpha, alpha)
    }
}

/// One evaluation of the security bound at a working point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityEstimate {
    pub mu: f64,
    pub visibility: f64,
    pub qber: f64,
    pub eve_info: f64,
    pub secret_fraction: f64,
}

impl SecurityEstimate {
    pub fn evaluate(mu: f64, t: f64, visibility: f64, qber: f64) -> Result<Self, DomainError> {
        let eve_info = eve_information(mu, t, visibility)?;
        let secret = secret_fraction(mu, t, visibility, qber)?;
        Ok(SecurityEstimate {
            mu,
            visibility,
            qber,
            eve_info,
            secret_fraction: secret,
        })
    }
}

/// Binary Shannon entropy in bits, with the limit value 0 at q in {0, 1}.
pub fn binary_entropy(q: f64) -> Result<f64, DomainError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(DomainError::OutOfRange {
            name: "q",
            value: q,
            domain: "[0, 1]",
        });
    }
    if q == 0.0 || q == 1.0 {
        return Ok(0.0);
    }
    Ok(-q * q.log2() - (1.0 - q) * (1.0 - q).log2())
}

/// Eavesdropper information bound `mu(1-t) + (1-V)(1+e^-mu)/(2 e^-mu)`.
pub fn eve_information(mu: f64, t: f64, visibility: f64) -> Result<f64, DomainError> {
    if !(mu > 0.0) {
        return Err(DomainError::OutOfRange {
            name: "mu",
            value: mu,
            domain: "(0, inf)",
        });
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(DomainError::OutOfRange {
            name: "t",
            value: t,
            domain: "(0, 1]",
        });
    }
    if !(0.0..=1.0).contains(&visibility) {
        return Err(DomainError::OutOfRange {
            name: "visibility",
            value: visibility,
            domain: "[0, 1]",
        });
    }
    let bsa = mu * (1.0 - t);
    let emu = (-mu).exp();
    let intercept = (1.0 - visibility) * (1.0 + emu) / (2.0 * emu);
    Ok(bsa + intercept)
}

/// Secret key fraction `max(0, 1 - h(q) - I_AE(mu, t, V))`.
pub fn secret_fraction(mu: f64, t: f64, visibility: f64, q: f64) -> Result<f64, DomainError> {
    let h = binary_entropy(q)?;
    let i_ae = eve_information(mu, t, visibility)?;
    Ok((1.0 - h - i_ae).max(0.0))
}

/// Decibel loss to linear transmission.
pub fn db_to_transmission(loss_db: f64) -> Result<f64, DomainError> {
    if !(loss_db >= 0.0) {
        return Err(DomainError::OutOfRange {
            name: "loss_db",
            value: loss_db,
            domain: "[0, inf)",
        });
    }
    Ok(10f64.powf(-loss_db / 10.0))
}

/// Linear transmission to decibel loss.
pub fn transmission_to_db(t: f64) -> Result<f64, DomainError> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(DomainError::OutOfRange {
            name: "t",
            value: t,
            domain: "(0, 1]",
        });
    }
    Ok(-10.0 * t.log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent evaluation routes used as oracles: natural-log algebra for
    // the entropy, expm1/exp-grouped algebra for the information bound.
    fn entropy_oracle(q: f64) -> f64 {
        if q == 0.0 || q == 1.0 {
            return 0.0;
        }
        let ln2 = std::f64::consts::LN_2;
        (q * (1.0 / q).ln() + (1.0 - q) * (1.0 / (1.0 - q)).ln()) / ln2
    }

    fn eve_oracle(mu: f64, t: f64, v: f64) -> f64 {
        mu - mu * t + (1.0 - v) * 0.5 * (mu.exp() + 1.0)
    }

    #[test]
    fn entropy_limit_cases() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
    }

    #[test]
    fn entropy_at_five_percent() {
        let h = binary_entropy(0.05).unwrap();
        assert!((h - entropy_oracle(0.05)).abs() < 1e-14);
        assert!((h - 0.28640).abs() < 5e-6);
    }

    #[test]
    fn entropy_rejects_out_of_range() {
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn entropy_symmetry() {
        let mut rng = crate::rng::Rng::from_seed(17);
        for _ in 0..1000 {
            let q = rng.next_f64();
            let a = binary_entropy(q).unwrap();
            let b = binary_entropy(1.0 - q).unwrap();
            assert!((a - b).abs() < 1e-12, "asymmetry at q={q}");
        }
    }

    #[test]
    fn eve_information_vanishes_on_perfect_channel() {
        for mu in [0.1, 0.5, 0.9] {
            assert_eq!(eve_information(mu, 1.0, 1.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn eve_information_examples() {
        let i = eve_information(0.5, 0.5, 1.0).unwrap();
        assert!((i - 0.25).abs() < 1e-15);

        let t = 10f64.powf(-4.3);
        let i = eve_information(0.5, t, 0.95).unwrap();
        assert!((i - eve_oracle(0.5, t, 0.95)).abs() < 1e-12);
        assert!((i - 0.5662).abs() < 1e-4);
    }

    #[test]
    fn eve_information_monotone_in_t_and_v() {
        let grid: Vec<f64> = (1..=40).map(|i| i as f64 / 40.0).collect();
        for mu in [0.2, 0.5, 0.8] {
            for w in grid.windows(2) {
                let (a, b) = (w[0], w[1]);
                assert!(
                    eve_information(mu, b, 0.9).unwrap() <= eve_information(mu, a, 0.9).unwrap()
                );
                assert!(
                    eve_information(mu, 0.3, b).unwrap() <= eve_information(mu, 0.3, a).unwrap()
                );
            }
        }
    }

    #[test]
    fn secret_fraction_examples() {
        assert!((secret_fraction(0.5, 1.0, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-15);

        let t = 10f64.powf(-4.3);
        let r = secret_fraction(0.5, t, 0.95, 0.05).unwrap();
        let expect = 1.0 - entropy_oracle(0.05) - eve_oracle(0.5, t, 0.95);
        assert!((r - expect).abs() < 1e-12);
        assert!((r - 0.147).abs() < 5e-4);

        // Clamp case: 1 - h - I_AE is negative, result must be exactly 0.
        let raw = 1.0 - entropy_oracle(0.15) - eve_oracle(0.5, t, 0.80);
        assert!(raw < 0.0);
        assert_eq!(secret_fraction(0.5, t, 0.80, 0.15).unwrap(), 0.0);
    }

    #[test]
    fn secret_fraction_stays_in_unit_interval() {
        let mut rng = crate::rng::Rng::from_seed(23);
        for _ in 0..2000 {
            let mu = 0.05 + rng.next_f64();
            let t = rng.next_f64().max(1e-9);
            let v = rng.next_f64();
            let q = rng.next_f64() * 0.5;
            let r = secret_fraction(mu, t, v, q).unwrap();
            assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn secret_fraction_zero_region() {
        // q >= 0.25 together with mu >= 0.5 and t <= 0.5 always clamps.
        for q in [0.25, 0.3, 0.4, 0.5] {
            for mu in [0.5, 0.7, 0.9] {
                for t in [0.05, 0.2, 0.5] {
                    for v in [0.0, 0.5, 0.9, 1.0] {
                        assert_eq!(secret_fraction(mu, t, v, q).unwrap(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn db_conversion_examples() {
        assert_eq!(db_to_transmission(0.0).unwrap(), 1.0);
        assert!((db_to_transmission(3.0).unwrap() - 0.5011872336272722).abs() < 1e-15);
        assert!((db_to_transmission(43.0).unwrap() - 5.011872336272722e-5).abs() < 1e-18);
        assert!(db_to_transmission(-1.0).is_err());
    }

    #[test]
    fn db_roundtrip_twelve_digits() {
        for db in [0.0, 0.3, 1.0, 3.0, 6.02, 21.0, 31.0, 43.0, 60.0] {
            let t = db_to_transmission(db).unwrap();
            let back = transmission_to_db(t).unwrap();
            assert!(
                (back - db).abs() <= 1e-12 * db.max(1.0),
                "roundtrip {db} -> {back}"
            );
        }
    }

    #[test]
    fn link_budget_distance_mapping() {
        let lb = LinkBudget::from_fiber_km(150.0, 0.21).unwrap();
        assert!((lb.loss_db - 31.5).abs() < 1e-12);
        let lb = LinkBudget::from_loss_db(43.0).unwrap();
        assert!(lb.fiber_km > 200.0, "43 dB should map past 200 km");
    }
}
