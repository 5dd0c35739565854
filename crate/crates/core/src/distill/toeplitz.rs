//! Privacy amplification by binary Toeplitz matrices.
//!
//! The n-input / m-output matrix is generated by a diagonal seed of
//! `n + m - 1` bits with entry `(i, j) = seed[i - j + m - 1]` for input index
//! `i` and output index `j`. Hashing is matrix multiplication over GF(2), so
//! it is linear: `hash(a ^ b) = hash(a) ^ hash(b)`.

use crate::error::DistillError;

/// Dimensions plus diagonal seed of one Toeplitz hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzSpec {
    pub n: usize,
    pub m: usize,
    /// `n + m - 1` seed bits, one per matrix diagonal.
    pub seed: Vec<u8>,
}

impl ToeplitzSpec {
    pub fn new(n: usize, m: usize, seed: Vec<u8>) -> Result<Self, DistillError> {
        let expect = n + m - 1;
        if seed.len() != expect {
            return Err(DistillError::BadSeedLength {
                expect,
                got: seed.len(),
            });
        }
        Ok(ToeplitzSpec { n, m, seed })
    }

    /// Matrix entry for input index `i`, output index `j`.
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> u8 {
        self.seed[i + self.m - 1 - j]
    }
}

fn pack_bits(bits: &[u8]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// Extract `len` bits of `words` starting at bit `offset` into a fresh
/// packed vector.
fn window(words: &[u64], offset: usize, len: usize) -> Vec<u64> {
    let mut out = vec![0u64; len.div_ceil(64)];
    let word_off = offset / 64;
    let bit_off = offset % 64;
    for (k, slot) in out.iter_mut().enumerate() {
        let lo = words.get(word_off + k).copied().unwrap_or(0) >> bit_off;
        let hi = if bit_off == 0 {
            0
        } else {
            words.get(word_off + k + 1).copied().unwrap_or(0) << (64 - bit_off)
        };
        *slot = lo | hi;
    }
    if len % 64 != 0 {
        let last = out.len() - 1;
        out[last] &= (1u64 << (len % 64)) - 1;
    }
    out
}

/// Apply the hash: returns `m` output bits.
pub fn privacy_amplify(input_bits: &[u8], spec: &ToeplitzSpec) -> Result<Vec<u8>, DistillError> {
    if input_bits.len() != spec.n {
        return Err(DistillError::LayoutMismatch("input length != n"));
    }
    let input = pack_bits(input_bits);
    let seed = pack_bits(&spec.seed);
    let mut out = Vec::with_capacity(spec.m);
    for j in 0..spec.m {
        // Row j of the matrix is the seed window of length n starting at
        // m - 1 - j.
        let row = window(&seed, spec.m - 1 - j, spec.n);
        let mut acc = 0u64;
        for (a, b) in input.iter().zip(&row) {
            acc ^= a & b;
        }
        out.push((acc.count_ones() & 1) as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Plain double-loop evaluation used as the oracle.
    fn amplify_oracle(input: &[u8], spec: &ToeplitzSpec) -> Vec<u8> {
        (0..spec.m)
            .map(|j| {
                let mut acc = 0u8;
                for (i, &b) in input.iter().enumerate() {
                    acc ^= b & spec.entry(i, j);
                }
                acc
            })
            .collect()
    }

    fn random_bits(rng: &mut Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| (rng.next_u64() & 1) as u8).collect()
    }

    #[test]
    fn seed_length_validated() {
        assert!(ToeplitzSpec::new(4, 2, vec![1, 0, 1, 1, 0]).is_ok());
        assert!(matches!(
            ToeplitzSpec::new(4, 2, vec![1, 0, 1]),
            Err(DistillError::BadSeedLength { expect: 5, got: 3 })
        ));
    }

    #[test]
    fn hand_computed_product() {
        // n = 4, m = 2, seed 10110. Entry (i, j) = seed[i + m - 1 - j]:
        //   j=0 row: seed[1..5] = 0,1,1,0 ; j=1 row: seed[0..4] = 1,0,1,1.
        // Input 1010: j=0: 1&0 ^ 0&1 ^ 1&1 ^ 0&0 = 1
        //             j=1: 1&1 ^ 0&0 ^ 1&1 ^ 0&1 = 0
        let spec = ToeplitzSpec::new(4, 2, vec![1, 0, 1, 1, 0]).unwrap();
        let input = [1, 0, 1, 0];
        let out = privacy_amplify(&input, &spec).unwrap();
        assert_eq!(out, vec![1, 0]);
        assert_eq!(out, amplify_oracle(&input, &spec));
    }

    #[test]
    fn matches_oracle_on_random_cases() {
        let mut rng = Rng::from_seed(41);
        for _ in 0..50 {
            let n = 1 + (rng.next_u64() % 300) as usize;
            let m = 1 + (rng.next_u64() % n as u64) as usize;
            let spec = ToeplitzSpec::new(n, m, random_bits(&mut rng, n + m - 1)).unwrap();
            let input = random_bits(&mut rng, n);
            assert_eq!(
                privacy_amplify(&input, &spec).unwrap(),
                amplify_oracle(&input, &spec)
            );
        }
    }

    #[test]
    fn zero_input_maps_to_zero() {
        let mut rng = Rng::from_seed(42);
        let spec = ToeplitzSpec::new(128, 64, random_bits(&mut rng, 191)).unwrap();
        let out = privacy_amplify(&vec![0; 128], &spec).unwrap();
        assert!(out.iter().all(|&b| b == 0));
    }

    #[test]
    fn linearity() {
        let mut rng = Rng::from_seed(43);
        for _ in 0..100 {
            let n = 256;
            let m = 100;
            let spec = ToeplitzSpec::new(n, m, random_bits(&mut rng, n + m - 1)).unwrap();
            let a = random_bits(&mut rng, n);
            let b = random_bits(&mut rng, n);
            let xor: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x ^ y).collect();
            let ha = privacy_amplify(&a, &spec).unwrap();
            let hb = privacy_amplify(&b, &spec).unwrap();
            let hx = privacy_amplify(&xor, &spec).unwrap();
            for j in 0..m {
                assert_eq!(hx[j], ha[j] ^ hb[j]);
            }
        }
    }

    #[test]
    fn collision_rate_matches_universality() {
        // Distinct random pairs under fresh seeds collide with probability
        // exactly 2^-m; check the Monte Carlo rate at m = 16 within 3 sigma.
        let mut rng = Rng::from_seed(44);
        let n = 64;
        let m = 16;
        let pairs = 100_000u64;
        let mut collisions = 0u64;
        for _ in 0..pairs {
            let spec = ToeplitzSpec::new(n, m, random_bits(&mut rng, n + m - 1)).unwrap();
            let a = random_bits(&mut rng, n);
            let mut b = random_bits(&mut rng, n);
            if a == b {
                b[0] ^= 1;
            }
            if privacy_amplify(&a, &spec).unwrap() == privacy_amplify(&b, &spec).unwrap() {
                collisions += 1;
            }
        }
        let p = 2f64.powi(-16);
        let sigma = (p * (1.0 - p) * pairs as f64).sqrt();
        assert!(
            ((collisions as f64) - p * pairs as f64).abs() <= 3.0 * sigma,
            "collisions {collisions}, expected {}",
            p * pairs as f64
        );
    }
}
