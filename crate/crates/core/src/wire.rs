//! Classical-channel wire format.
//!
//! Frame layout: magic byte `0xC0`, message-type byte, 4-byte little-endian
//! payload length, payload, then an 8-byte authentication tag for the message
//! types that require one (everything exchanged during distillation plus
//! visibility reports).
//!
//! Detection announcements encode slot indices as varint deltas; the first
//! delta is taken against -1 so index 0 is representable and all deltas are
//! at least 1, which makes "strictly increasing" checkable during parsing.
//! All decoders are strict: non-canonical varints, stray padding bits and
//! truncated buffers are rejected, so decode-encode round-trips are exact.

use crate::error::WireError;

pub const FRAME_MAGIC: u8 = 0xC0;
/// Magic byte of the physical-layer framing used by the two-endpoint
/// transport (quantum batches and batch delimiters). Kept distinct so the
/// classical parser never sees it.
pub const PHYS_MAGIC: u8 = 0xC1;

pub const MAX_PAYLOAD: u32 = 1 << 20;
pub const TAG_LEN: usize = 8;

/// Message types, in wire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    SyncPattern = 0,
    DetectAnnounce = 1,
    DmAnnounce = 2,
    DecoyRemove = 3,
    VisReport = 4,
    EcParity = 5,
    EcShuffle = 6,
    PaSeed = 7,
    AuthTag = 8,
    Restart = 9,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => MsgType::SyncPattern,
            1 => MsgType::DetectAnnounce,
            2 => MsgType::DmAnnounce,
            3 => MsgType::DecoyRemove,
            4 => MsgType::VisReport,
            5 => MsgType::EcParity,
            6 => MsgType::EcShuffle,
            7 => MsgType::PaSeed,
            8 => MsgType::AuthTag,
            9 => MsgType::Restart,
            other => return Err(WireError::UnknownType(other)),
        })
    }

    /// Distillation-phase traffic and visibility reports carry tags.
    pub fn requires_tag(self) -> bool {
        matches!(
            self,
            MsgType::VisReport
                | MsgType::EcParity
                | MsgType::EcShuffle
                | MsgType::PaSeed
                | MsgType::AuthTag
        )
    }
}

// --- varint ----------------------------------------------------------------

/// Append an LEB128 varint.
pub fn put_varint(buf: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

/// Decode a canonical LEB128 varint. Rejects padding (a continuation into a
/// zero final byte), overlong encodings and overflow.
pub fn get_varint(buf: &[u8]) -> Result<(u64, usize), WireError> {
    let mut value = 0u64;
    let mut shift = 0u32;
    for (i, &byte) in buf.iter().enumerate() {
        if i == 10 {
            return Err(WireError::BadVarint);
        }
        let part = (byte & 0x7f) as u64;
        if shift == 63 && part > 1 {
            return Err(WireError::BadVarint);
        }
        value |= part << shift;
        if byte & 0x80 == 0 {
            if byte == 0 && i > 0 {
                return Err(WireError::BadVarint);
            }
            return Ok((value, i + 1));
        }
        shift += 7;
    }
    Err(WireError::BadVarint)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn need(&self, n: usize) -> Result<(), WireError> {
        if self.buf.len() - self.pos < n {
            Err(WireError::Truncated {
                need: n,
                have: self.buf.len() - self.pos,
            })
        } else {
            Ok(())
        }
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        self.need(1)?;
        let v = self.buf[self.pos];
        self.pos += 1;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        self.need(8)?;
        let v = u64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn varint(&mut self) -> Result<u64, WireError> {
        let (v, n) = get_varint(&self.buf[self.pos..])?;
        self.pos += n;
        Ok(v)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        self.need(n)?;
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn finish(&self, what: &'static str) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            Err(WireError::BadPayload(what))
        } else {
            Ok(())
        }
    }
}

// --- index lists -----------------------------------------------------------

/// Encode a strictly increasing index list as deltas (first against -1).
pub fn encode_index_list(buf: &mut Vec<u8>, indices: &[u64]) {
    put_varint(buf, indices.len() as u64);
    let mut prev: i128 = -1;
    for &idx in indices {
        let delta = idx as i128 - prev;
        debug_assert!(delta >= 1, "indices must be strictly increasing");
        put_varint(buf, delta as u64);
        prev = idx as i128;
    }
}

fn decode_index_list(r: &mut Reader, limit: u64) -> Result<Vec<u64>, WireError> {
    let count = r.varint()?;
    if count > limit {
        return Err(WireError::BadPayload("index list too long"));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut prev: i128 = -1;
    for _ in 0..count {
        let delta = r.varint()?;
        if delta == 0 {
            return Err(WireError::NonMonotoneIndices);
        }
        let idx = prev + delta as i128;
        if idx > u64::MAX as i128 {
            return Err(WireError::BadPayload("index overflow"));
        }
        out.push(idx as u64);
        prev = idx;
    }
    Ok(out)
}

// --- bitsets ---------------------------------------------------------------

/// A packed bit vector with explicit length; padding bits must be zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitsetPayload {
    pub nbits: u64,
    pub bytes: Vec<u8>,
}

impl BitsetPayload {
    pub fn from_bits(bits: &[u8]) -> Self {
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b != 0 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        BitsetPayload {
            nbits: bits.len() as u64,
            bytes,
        }
    }

    pub fn bit(&self, i: u64) -> u8 {
        (self.bytes[(i / 8) as usize] >> (i % 8)) & 1
    }

    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.nbits).map(|i| self.bit(i)).collect()
    }

    fn encode(&self, buf: &mut Vec<u8>) {
        put_varint(buf, self.nbits);
        buf.extend_from_slice(&self.bytes);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        let nbits = r.varint()?;
        if nbits > (MAX_PAYLOAD as u64) * 8 {
            return Err(WireError::BadPayload("bitset too long"));
        }
        let nbytes = (nbits as usize).div_ceil(8);
        let bytes = r.bytes(nbytes)?.to_vec();
        if nbits % 8 != 0 {
            let last = bytes[nbytes - 1];
            if last >> (nbits % 8) != 0 {
                return Err(WireError::BadPayload("bitset padding not zero"));
            }
        }
        Ok(BitsetPayload { nbits, bytes })
    }
}

// --- messages ----------------------------------------------------------------

/// Visibility-report flavors: exchange-phase estimates, per-point scan
/// counts, and the sampled-QBER digest.
#[derive(Debug, Clone, PartialEq)]
pub enum VisReport {
    Exchange {
        visibility: f64,
        ci_low: f64,
        ci_high: f64,
        interfering_clicks: u64,
        noninterfering_clicks: u64,
        interfering_opportunities: u64,
        sufficient: bool,
    },
    ScanCounts {
        point: u32,
        clicks: u64,
        opportunities: u64,
    },
    SampleQber {
        compared: u64,
        mismatches: u64,
    },
}

/// Typed classical-channel messages.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassicalMessage {
    /// Initialization traffic: the alignment pattern spec (role 0) or the
    /// receiver's alignment result (role 1).
    SyncPattern {
        role: u8,
        pattern_seed: u32,
        length_slots: u32,
        result: u64,
    },
    /// Data-line detections, as slot indices.
    DetectAnnounce { indices: Vec<u64> },
    /// Monitor-line detections, as slot indices.
    DmAnnounce { indices: Vec<u64> },
    /// Ack of an announce window: every index up to `window_end_slot` has
    /// been pre-sifted; `remove` lists announced detections that fell into
    /// decoy frames and must be dropped.
    DecoyRemove {
        window_end_slot: u64,
        remove: Vec<u64>,
    },
    VisReport(VisReport),
    /// Cascade parity bitset for the current interval set of (pass, block).
    EcParity {
        pass: u8,
        block: u64,
        parities: BitsetPayload,
    },
    /// Shuffle seed for a cascade pass, carrying the QBER estimate the
    /// reference side picked for the block (units of 1e-5).
    EcShuffle {
        pass: u8,
        block: u64,
        seed: u64,
        q_e5: u32,
    },
    /// Privacy-amplification Toeplitz spec: output length and diagonal seed.
    PaSeed {
        n: u32,
        m: u32,
        seed_bits: BitsetPayload,
    },
    /// Post-correction verification hash of a block (50-bit value and the
    /// hash key that was used).
    AuthTag { block: u64, hash: u64, key: u64 },
    Restart { reason: u8 },
}

/// Session restart / phase-change reason codes.
pub mod restart_reason {
    pub const DESYNC: u8 = 0;
    pub const REALIGN: u8 = 1;
    pub const RESUME: u8 = 2;
    pub const HALT: u8 = 3;
}

impl ClassicalMessage {
    pub fn msg_type(&self) -> MsgType {
        match self {
            ClassicalMessage::SyncPattern { .. } => MsgType::SyncPattern,
            ClassicalMessage::DetectAnnounce { .. } => MsgType::DetectAnnounce,
            ClassicalMessage::DmAnnounce { .. } => MsgType::DmAnnounce,
            ClassicalMessage::DecoyRemove { .. } => MsgType::DecoyRemove,
            ClassicalMessage::VisReport(_) => MsgType::VisReport,
            ClassicalMessage::EcParity { .. } => MsgType::EcParity,
            ClassicalMessage::EcShuffle { .. } => MsgType::EcShuffle,
            ClassicalMessage::PaSeed { .. } => MsgType::PaSeed,
            ClassicalMessage::AuthTag { .. } => MsgType::AuthTag,
            ClassicalMessage::Restart { .. } => MsgType::Restart,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        match self {
            ClassicalMessage::SyncPattern {
                role,
                pattern_seed,
                length_slots,
                result,
            } => {
                buf.push(*role);
                buf.extend_from_slice(&pattern_seed.to_le_bytes());
                buf.extend_from_slice(&length_slots.to_le_bytes());
                buf.extend_from_slice(&result.to_le_bytes());
            }
            ClassicalMessage::DetectAnnounce { indices }
            | ClassicalMessage::DmAnnounce { indices } => {
                encode_index_list(&mut buf, indices);
            }
            ClassicalMessage::DecoyRemove {
                window_end_slot,
                remove,
            } => {
                put_varint(&mut buf, *window_end_slot);
                encode_index_list(&mut buf, remove);
            }
            ClassicalMessage::VisReport(report) => match report {
                VisReport::Exchange {
                    visibility,
                    ci_low,
                    ci_high,
                    interfering_clicks,
                    noninterfering_clicks,
                    interfering_opportunities,
                    sufficient,
                } => {
                    buf.push(0);
                    buf.extend_from_slice(&visibility.to_bits().to_le_bytes());
                    buf.extend_from_slice(&ci_low.to_bits().to_le_bytes());
                    buf.extend_from_slice(&ci_high.to_bits().to_le_bytes());
                    put_varint(&mut buf, *interfering_clicks);
                    put_varint(&mut buf, *noninterfering_clicks);
                    put_varint(&mut buf, *interfering_opportunities);
                    buf.push(u8::from(*sufficient));
                }
                VisReport::ScanCounts {
                    point,
                    clicks,
                    opportunities,
                } => {
                    buf.push(1);
                    buf.extend_from_slice(&point.to_le_bytes());
                    put_varint(&mut buf, *clicks);
                    put_varint(&mut buf, *opportunities);
                }
                VisReport::SampleQber {
                    compared,
                    mismatches,
                } => {
                    buf.push(2);
                    put_varint(&mut buf, *compared);
                    put_varint(&mut buf, *mismatches);
                }
            },
            ClassicalMessage::EcParity {
                pass,
                block,
                parities,
            } => {
                buf.push(*pass);
                put_varint(&mut buf, *block);
                parities.encode(&mut buf);
            }
            ClassicalMessage::EcShuffle { pass, block, seed, q_e5 } => {
                buf.push(*pass);
                put_varint(&mut buf, *block);
                buf.extend_from_slice(&seed.to_le_bytes());
                buf.extend_from_slice(&q_e5.to_le_bytes());
            }
            ClassicalMessage::PaSeed { n, m, seed_bits } => {
                buf.extend_from_slice(&n.to_le_bytes());
                buf.extend_from_slice(&m.to_le_bytes());
                seed_bits.encode(&mut buf);
            }
            ClassicalMessage::AuthTag { block, hash, key } => {
                put_varint(&mut buf, *block);
                buf.extend_from_slice(&hash.to_le_bytes());
                buf.extend_from_slice(&key.to_le_bytes());
            }
            ClassicalMessage::Restart { reason } => {
                buf.push(*reason);
            }
        }
        buf
    }

    pub fn decode_payload(ty: MsgType, payload: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(payload);
        let max_idx = MAX_PAYLOAD as u64;
        let msg = match ty {
            MsgType::SyncPattern => {
                let role = r.u8()?;
                let pattern_seed = r.u32()?;
                let length_slots = r.u32()?;
                let result = r.u64()?;
                ClassicalMessage::SyncPattern {
                    role,
                    pattern_seed,
                    length_slots,
                    result,
                }
            }
            MsgType::DetectAnnounce => ClassicalMessage::DetectAnnounce {
                indices: decode_index_list(&mut r, max_idx)?,
            },
            MsgType::DmAnnounce => ClassicalMessage::DmAnnounce {
                indices: decode_index_list(&mut r, max_idx)?,
            },
            MsgType::DecoyRemove => {
                let window_end_slot = r.varint()?;
                let remove = decode_index_list(&mut r, max_idx)?;
                ClassicalMessage::DecoyRemove {
                    window_end_slot,
                    remove,
                }
            }
            MsgType::VisReport => {
                let kind = r.u8()?;
                let report = match kind {
                    0 => VisReport::Exchange {
                        visibility: r.f64()?,
                        ci_low: r.f64()?,
                        ci_high: r.f64()?,
                        interfering_clicks: r.varint()?,
                        noninterfering_clicks: r.varint()?,
                        interfering_opportunities: r.varint()?,
                        sufficient: r.u8()? != 0,
                    },
                    1 => VisReport::ScanCounts {
                        point: r.u32()?,
                        clicks: r.varint()?,
                        opportunities: r.varint()?,
                    },
                    2 => VisReport::SampleQber {
                        compared: r.varint()?,
                        mismatches: r.varint()?,
                    },
                    _ => return Err(WireError::BadPayload("vis report kind")),
                };
                ClassicalMessage::VisReport(report)
            }
            MsgType::EcParity => {
                let pass = r.u8()?;
                let block = r.varint()?;
                let parities = BitsetPayload::decode(&mut r)?;
                ClassicalMessage::EcParity {
                    pass,
                    block,
                    parities,
                }
            }
            MsgType::EcShuffle => ClassicalMessage::EcShuffle {
                pass: r.u8()?,
                block: r.varint()?,
                seed: r.u64()?,
                q_e5: r.u32()?,
            },
            MsgType::PaSeed => {
                let n = r.u32()?;
                let m = r.u32()?;
                if n == 0 || n > MAX_PAYLOAD || m > n {
                    return Err(WireError::BadPayload("pa dimensions"));
                }
                let seed_bits = BitsetPayload::decode(&mut r)?;
                if seed_bits.nbits != (n as u64) + (m as u64) - 1 {
                    return Err(WireError::BadPayload("pa seed length"));
                }
                ClassicalMessage::PaSeed { n, m, seed_bits }
            }
            MsgType::AuthTag => ClassicalMessage::AuthTag {
                block: r.varint()?,
                hash: r.u64()?,
                key: r.u64()?,
            },
            MsgType::Restart => ClassicalMessage::Restart { reason: r.u8()? },
        };
        r.finish("trailing bytes")?;
        Ok(msg)
    }
}

/// A framed message with optional authentication tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg: ClassicalMessage,
    pub tag: Option<[u8; TAG_LEN]>,
}

impl Frame {
    pub fn untagged(msg: ClassicalMessage) -> Self {
        debug_assert!(!msg.msg_type().requires_tag());
        Frame { msg, tag: None }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.msg.encode_payload();
        let ty = self.msg.msg_type();
        let mut out = Vec::with_capacity(6 + payload.len() + TAG_LEN);
        out.push(FRAME_MAGIC);
        out.push(ty as u8);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        if ty.requires_tag() {
            out.extend_from_slice(&self.tag.unwrap_or([0; TAG_LEN]));
        }
        out
    }

    /// Decode one frame from the front of `buf`; returns the frame and the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), WireError> {
        if buf.len() < 6 {
            return Err(WireError::Truncated {
                need: 6,
                have: buf.len(),
            });
        }
        if buf[0] != FRAME_MAGIC {
            return Err(WireError::BadMagic(buf[0]));
        }
        let ty = MsgType::from_u8(buf[1])?;
        let len = u32::from_le_bytes(buf[2..6].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(WireError::Oversized(len));
        }
        let need = 6 + len as usize + if ty.requires_tag() { TAG_LEN } else { 0 };
        if buf.len() < need {
            return Err(WireError::Truncated {
                need,
                have: buf.len(),
            });
        }
        let payload = &buf[6..6 + len as usize];
        let msg = ClassicalMessage::decode_payload(ty, payload)?;
        let tag = if ty.requires_tag() {
            let mut t = [0u8; TAG_LEN];
            t.copy_from_slice(&buf[6 + len as usize..need]);
            Some(t)
        } else {
            None
        };
        Ok((Frame { msg, tag }, need))
    }

    /// Bytes covered by the authentication tag: type byte plus payload.
    pub fn auth_bytes(msg: &ClassicalMessage) -> Vec<u8> {
        let mut v = vec![msg.msg_type() as u8];
        v.extend_from_slice(&msg.encode_payload());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn roundtrip(msg: ClassicalMessage) {
        let tag = msg.msg_type().requires_tag().then_some([7u8; TAG_LEN]);
        let frame = Frame { msg, tag };
        let bytes = frame.encode();
        let (back, used) = Frame::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, frame);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn varint_canonical_roundtrip() {
        for v in [0u64, 1, 127, 128, 300, u32::MAX as u64, u64::MAX] {
            let mut buf = Vec::new();
            put_varint(&mut buf, v);
            let (back, n) = get_varint(&buf).unwrap();
            assert_eq!(back, v);
            assert_eq!(n, buf.len());
        }
        // Non-canonical: 0x80 0x00 encodes 0 in two bytes.
        assert!(get_varint(&[0x80, 0x00]).is_err());
        // Overflow past 64 bits.
        assert!(get_varint(&[0xff; 10]).is_err());
        // Truncated continuation.
        assert!(get_varint(&[0x80]).is_err());
    }

    #[test]
    fn message_roundtrips() {
        roundtrip(ClassicalMessage::SyncPattern {
            role: 0,
            pattern_seed: 0xDEAD_BEEF,
            length_slots: 10_000,
            result: 137,
        });
        roundtrip(ClassicalMessage::DetectAnnounce {
            indices: vec![0, 5, 6, 10_000_000],
        });
        roundtrip(ClassicalMessage::DmAnnounce { indices: vec![] });
        roundtrip(ClassicalMessage::DecoyRemove {
            window_end_slot: 123_456,
            remove: vec![17, 44],
        });
        roundtrip(ClassicalMessage::VisReport(VisReport::Exchange {
            visibility: 0.97,
            ci_low: 0.95,
            ci_high: 0.99,
            interfering_clicks: 12,
            noninterfering_clicks: 340,
            interfering_opportunities: 100_000,
            sufficient: true,
        }));
        roundtrip(ClassicalMessage::VisReport(VisReport::ScanCounts {
            point: 3,
            clicks: 55,
            opportunities: 1_000_000,
        }));
        roundtrip(ClassicalMessage::VisReport(VisReport::SampleQber {
            compared: 100,
            mismatches: 5,
        }));
        roundtrip(ClassicalMessage::EcParity {
            pass: 1,
            block: 42,
            parities: BitsetPayload::from_bits(&[1, 0, 1, 1, 0, 0, 1, 0, 1]),
        });
        roundtrip(ClassicalMessage::EcShuffle {
            pass: 2,
            block: 42,
            seed: 0x0123_4567_89ab_cdef,
            q_e5: 5000,
        });
        roundtrip(ClassicalMessage::PaSeed {
            n: 8,
            m: 4,
            seed_bits: BitsetPayload::from_bits(&[1, 0, 1, 1, 0, 1, 0, 0, 1, 1, 0]),
        });
        roundtrip(ClassicalMessage::AuthTag {
            block: 7,
            hash: 0x0003_ffff_ffff_ffff,
            key: 99,
        });
        roundtrip(ClassicalMessage::Restart {
            reason: restart_reason::REALIGN,
        });
    }

    #[test]
    fn rejects_malformed_frames() {
        assert!(matches!(
            Frame::decode(&[0xC0, 0x01]),
            Err(WireError::Truncated { .. })
        ));
        assert!(matches!(
            Frame::decode(&[0xC1, 0, 0, 0, 0, 0]),
            Err(WireError::BadMagic(0xC1))
        ));
        assert!(matches!(
            Frame::decode(&[0xC0, 99, 0, 0, 0, 0]),
            Err(WireError::UnknownType(99))
        ));
        // Oversized length field.
        let mut buf = vec![0xC0, 1];
        buf.extend_from_slice(&(MAX_PAYLOAD + 1).to_le_bytes());
        assert!(matches!(Frame::decode(&buf), Err(WireError::Oversized(_))));
        // Restart payload must be exactly one byte.
        let mut buf = vec![0xC0, 9];
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&[0, 0]);
        assert!(Frame::decode(&buf).is_err());
    }

    #[test]
    fn announce_indices_must_increase() {
        let msg = ClassicalMessage::DetectAnnounce {
            indices: vec![3, 9],
        };
        let mut payload = msg.encode_payload();
        // Patch the second delta to zero: equal indices.
        let last = payload.len() - 1;
        payload[last] = 0;
        assert!(matches!(
            ClassicalMessage::decode_payload(MsgType::DetectAnnounce, &payload),
            Err(WireError::NonMonotoneIndices) | Err(WireError::BadVarint)
        ));
    }

    #[test]
    fn bitset_padding_must_be_zero() {
        let good = ClassicalMessage::EcParity {
            pass: 1,
            block: 0,
            parities: BitsetPayload::from_bits(&[1, 1, 1]),
        };
        let mut payload = good.encode_payload();
        *payload.last_mut().unwrap() |= 0xF0;
        assert!(ClassicalMessage::decode_payload(MsgType::EcParity, &payload).is_err());
    }

    #[test]
    fn fuzz_style_random_bytes_never_panic() {
        let mut rng = Rng::from_seed(0xfeed);
        for _ in 0..20_000 {
            let len = (rng.next_u64() % 64) as usize;
            let bytes: Vec<u8> = (0..len).map(|_| rng.next_u64() as u8).collect();
            let _ = Frame::decode(&bytes);
        }
    }

    #[test]
    fn decode_encode_identity_on_valid_frames() {
        let mut rng = Rng::from_seed(0xabc);
        for _ in 0..2000 {
            let n = (rng.next_u64() % 20) as usize;
            let mut indices: Vec<u64> = Vec::new();
            let mut cur = 0u64;
            for _ in 0..n {
                cur += 1 + rng.next_u64() % 1000;
                indices.push(cur);
            }
            roundtrip(ClassicalMessage::DetectAnnounce { indices });
        }
    }
}
