//! Wegman-Carter message authentication: a polynomial-evaluation universal
//! hash over GF(2^64), one-time-pad masked with fresh key bits from the
//! pre-shared pool. The polynomial key is drawn from the pool once; the pad
//! is never reused, so each tag consumes 64 pool bits.

use crate::error::DistillError;

/// GF(2^64) with reduction polynomial x^64 + x^4 + x^3 + x + 1.
const GF64_POLY: u64 = 0x1b;

/// Carry-less multiply in GF(2^64).
pub fn gf64_mul(a: u64, b: u64) -> u64 {
    let mut acc: u128 = 0;
    let a = a as u128;
    for i in 0..64 {
        if (b >> i) & 1 == 1 {
            acc ^= a << i;
        }
    }
    // Reduce the 127-bit product.
    let mut hi = (acc >> 64) as u64;
    let mut lo = acc as u64;
    while hi != 0 {
        let mut folded: u128 = 0;
        let poly = GF64_POLY as u128;
        for i in 0..64 {
            if (hi >> i) & 1 == 1 {
                folded ^= poly << i;
            }
        }
        hi = (folded >> 64) as u64;
        lo ^= folded as u64;
    }
    lo
}

/// Polynomial-evaluation hash of a byte string: Horner evaluation over
/// 64-bit little-endian blocks with a final length block, so extensions and
/// truncations change the value.
pub fn poly_hash(key: u64, message: &[u8]) -> u64 {
    let mut acc = 0u64;
    for chunk in message.chunks(8) {
        let mut block = [0u8; 8];
        block[..chunk.len()].copy_from_slice(chunk);
        acc = gf64_mul(acc, key) ^ u64::from_le_bytes(block);
    }
    acc = gf64_mul(acc, key) ^ (message.len() as u64);
    gf64_mul(acc, key)
}

/// Truncated polynomial hash used for post-correction block verification.
pub const VERIFY_HASH_BITS: u32 = 50;

pub fn verify_hash50(key: u64, bits: &[u8]) -> u64 {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    poly_hash(key, &bytes) & ((1u64 << VERIFY_HASH_BITS) - 1)
}

/// Pre-shared secret bits with a consumption cursor. Bits are never reused;
/// exhaustion halts authentication before any unauthenticated message could
/// be sent.
#[derive(Debug, Clone)]
pub struct AuthKeyPool {
    words: Vec<u64>,
    /// Bit cursor into `words`.
    cursor: u64,
    poly_key: u64,
    pub tags_issued: u64,
}

pub const TAG_BITS: u64 = 64;

impl AuthKeyPool {
    /// Build a pool of `pool_bits` from a seeded generator; both endpoints
    /// construct the same pool from the shared secret seed.
    pub fn from_seed(seed: u64, pool_bits: u64) -> Self {
        let mut rng = crate::rng::Rng::derive(seed, crate::rng::streams::AUTH_POOL);
        let words = (0..pool_bits.div_ceil(64)).map(|_| rng.next_u64()).collect();
        let mut pool = AuthKeyPool {
            words,
            cursor: 0,
            poly_key: 0,
            tags_issued: 0,
        };
        // The polynomial key is the first pool draw; zero would make the
        // hash degenerate, so it is repaired deterministically.
        let k = pool.take_bits(64).unwrap_or(0);
        pool.poly_key = if k == 0 { 1 } else { k };
        pool
    }

    pub fn remaining_bits(&self) -> u64 {
        (self.words.len() as u64) * 64 - self.cursor
    }

    fn take_bits(&mut self, n: u64) -> Result<u64, DistillError> {
        assert!(n <= 64);
        if self.remaining_bits() < n {
            return Err(DistillError::PoolExhausted {
                need: n as usize,
                left: self.remaining_bits() as usize,
            });
        }
        let mut v = 0u64;
        for i in 0..n {
            let bit_idx = self.cursor + i;
            let bit = (self.words[(bit_idx / 64) as usize] >> (bit_idx % 64)) & 1;
            v |= bit << i;
        }
        self.cursor += n;
        Ok(v)
    }

    /// Authenticate a message, consuming 64 fresh pad bits.
    pub fn authenticate(&mut self, message: &[u8]) -> Result<[u8; 8], DistillError> {
        let pad = self.take_bits(TAG_BITS)?;
        self.tags_issued += 1;
        Ok((poly_hash(self.poly_key, message) ^ pad).to_le_bytes())
    }

    /// Verify a tag. Consumes the same pad bits as the peer's
    /// `authenticate`, so both pools stay in lockstep.
    pub fn verify(&mut self, message: &[u8], tag: &[u8; 8]) -> Result<bool, DistillError> {
        let expect = self.authenticate(message)?;
        Ok(&expect == tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn gf64_mul_properties() {
        let mut rng = Rng::from_seed(50);
        for _ in 0..200 {
            let a = rng.next_u64();
            let b = rng.next_u64();
            let c = rng.next_u64();
            assert_eq!(gf64_mul(a, b), gf64_mul(b, a));
            assert_eq!(gf64_mul(a, 1), a);
            assert_eq!(gf64_mul(a, 0), 0);
            // Distributivity over xor.
            assert_eq!(
                gf64_mul(a, b ^ c),
                gf64_mul(a, b) ^ gf64_mul(a, c)
            );
        }
    }

    #[test]
    fn tag_roundtrip() {
        let mut alice = AuthKeyPool::from_seed(7, 1 << 16);
        let mut bob = AuthKeyPool::from_seed(7, 1 << 16);
        let msg = b"announce 12345";
        let tag = alice.authenticate(msg).unwrap();
        assert!(bob.verify(msg, &tag).unwrap());
    }

    #[test]
    fn single_bit_tamper_always_detected() {
        let mut rng = Rng::from_seed(51);
        let mut failures = 0;
        for trial in 0..1000 {
            let mut alice = AuthKeyPool::from_seed(trial, 4096);
            let mut bob = AuthKeyPool::from_seed(trial, 4096);
            let len = 1 + (rng.next_u64() % 200) as usize;
            let mut msg: Vec<u8> = (0..len).map(|_| rng.next_u64() as u8).collect();
            let tag = alice.authenticate(&msg).unwrap();
            let bit = (rng.next_u64() % (len as u64 * 8)) as usize;
            msg[bit / 8] ^= 1 << (bit % 8);
            if !bob.verify(&msg, &tag).unwrap() {
                failures += 1;
            }
        }
        assert_eq!(failures, 1000);
    }

    #[test]
    fn truncation_and_extension_detected() {
        let mut alice = AuthKeyPool::from_seed(9, 4096);
        let mut bob = AuthKeyPool::from_seed(9, 4096);
        let tag = alice.authenticate(b"abc\x00").unwrap();
        assert!(!bob.verify(b"abc", &tag).unwrap());
    }

    #[test]
    fn pads_are_not_reused() {
        let mut pool = AuthKeyPool::from_seed(10, 4096);
        let t1 = pool.authenticate(b"same message").unwrap();
        let t2 = pool.authenticate(b"same message").unwrap();
        assert_ne!(t1, t2);
    }

    #[test]
    fn exhaustion_halts_cleanly() {
        // 192 bits: 64 for the polynomial key leaves exactly two tags.
        let mut pool = AuthKeyPool::from_seed(11, 192);
        assert!(pool.authenticate(b"one").is_ok());
        assert!(pool.authenticate(b"two").is_ok());
        let err = pool.authenticate(b"three").unwrap_err();
        assert!(matches!(err, DistillError::PoolExhausted { .. }));
    }

    #[test]
    fn verify_hash_sensitive_to_any_flip() {
        let mut rng = Rng::from_seed(52);
        let bits: Vec<u8> = (0..4096).map(|_| (rng.next_u64() & 1) as u8).collect();
        let key = rng.next_u64() | 1;
        let h = verify_hash50(key, &bits);
        assert!(h < (1 << VERIFY_HASH_BITS));
        for _ in 0..100 {
            let mut tampered = bits.clone();
            let i = (rng.next_u64() % 4096) as usize;
            tampered[i] ^= 1;
            assert_ne!(verify_hash50(key, &tampered), h);
        }
    }
}
