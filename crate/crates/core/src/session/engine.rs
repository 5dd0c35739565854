//! Lockstep batch engine and transports.
//!
//! Each batch, Alice emits a quantum batch (the symbol stream plus the laser
//! phase setpoint riding on the light) and a bundle of classical frames; Bob
//! replies with his own bundle. Classical latency is modeled by applying
//! frames `delta` batches after the sender's batch, so the protocol history
//! is a pure function of the seeds regardless of transport: the in-process
//! queue pair and the two-socket mode produce identical runs.

use std::collections::VecDeque;
use std::io::{Read, Write};

use crate::error::SessionError;
use crate::params::SystemParams;
use crate::session::alice::AliceEndpoint;
use crate::session::bob::BobEndpoint;
use crate::session::EndpointReport;
use crate::wire::PHYS_MAGIC;

/// Fixed timing derived from the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub batch_slots: u64,
    /// One-way classical latency in batches (>= 1).
    pub delta: u64,
    /// Announce-round cadence in batches (one classical round-trip).
    pub period: u64,
    pub n_batches: u64,
}

impl Schedule {
    pub fn from_params(params: &SystemParams, n_slots: u64) -> Self {
        let batch_slots = params.protocol.batch_slots;
        Schedule {
            batch_slots,
            delta: params.latency_batches(),
            period: params.announce_period_batches(),
            n_batches: n_slots.div_ceil(batch_slots),
        }
    }

    pub fn total_slots(&self) -> u64 {
        self.n_batches * self.batch_slots
    }
}

/// One batch of emitted light: symbol codes (two slots each) plus the phase
/// setpoint and a vacuum flag for dark dwells.
#[derive(Debug, Clone, PartialEq)]
pub struct QBatch {
    pub start_slot: u64,
    pub phase_setpoint: f64,
    pub vacuum: bool,
    pub symbols: Vec<u8>,
}

/// Everything one endpoint sends for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub batch: u64,
    pub frames: Vec<Vec<u8>>,
    pub qbatch: Option<QBatch>,
}

/// Classical frames waiting for their application batch.
#[derive(Debug, Default)]
pub struct Inbox {
    queue: VecDeque<(u64, u64, Vec<u8>)>,
}

impl Inbox {
    /// Enqueue every frame of a received bundle; it becomes visible to the
    /// endpoint `delta` batches after the sender's batch stamp.
    pub fn accept(&mut self, bundle_batch: u64, frames: Vec<Vec<u8>>, delta: u64) {
        for f in frames {
            self.queue.push_back((bundle_batch + delta, bundle_batch, f));
        }
    }

    /// Drain frames applicable at `batch`, preserving arrival order.
    pub fn drain_ready(&mut self, batch: u64) -> Vec<(u64, Vec<u8>)> {
        let mut out = Vec::new();
        while let Some(&(apply, sent, _)) = self.queue.front() {
            if apply <= batch {
                let (_, _, f) = self.queue.pop_front().unwrap();
                out.push((sent, f));
            } else {
                break;
            }
        }
        out
    }
}

// --- physical-layer bundle codec (two-endpoint transport) -------------------

const PHYS_KIND_BUNDLE: u8 = 0;
pub const PHYS_MAX_LEN: u32 = 1 << 24;

/// Serialize a bundle for the socket transport: `0xC1`, kind byte, 4-byte
/// little-endian length, then the bundle body.
pub fn phys_encode(bundle: &Bundle) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&bundle.batch.to_le_bytes());
    body.extend_from_slice(&(bundle.frames.len() as u32).to_le_bytes());
    for f in &bundle.frames {
        body.extend_from_slice(&(f.len() as u32).to_le_bytes());
        body.extend_from_slice(f);
    }
    match &bundle.qbatch {
        None => body.push(0),
        Some(q) => {
            body.push(1);
            body.extend_from_slice(&q.start_slot.to_le_bytes());
            body.extend_from_slice(&q.phase_setpoint.to_bits().to_le_bytes());
            body.push(u8::from(q.vacuum));
            body.extend_from_slice(&(q.symbols.len() as u32).to_le_bytes());
            body.extend_from_slice(&q.symbols);
        }
    }
    let mut out = Vec::with_capacity(body.len() + 6);
    out.push(PHYS_MAGIC);
    out.push(PHYS_KIND_BUNDLE);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decode one physical-layer bundle from the front of `buf`.
pub fn phys_decode(buf: &[u8]) -> Result<(Bundle, usize), SessionError> {
    use crate::error::WireError;
    let need = |n: usize, have: usize| -> SessionError {
        WireError::Truncated { need: n, have }.into()
    };
    if buf.len() < 6 {
        return Err(need(6, buf.len()));
    }
    if buf[0] != PHYS_MAGIC {
        return Err(WireError::BadMagic(buf[0]).into());
    }
    if buf[1] != PHYS_KIND_BUNDLE {
        return Err(WireError::BadPayload("phys kind").into());
    }
    let len = u32::from_le_bytes(buf[2..6].try_into().unwrap());
    if len > PHYS_MAX_LEN {
        return Err(WireError::Oversized(len).into());
    }
    let total = 6 + len as usize;
    if buf.len() < total {
        return Err(need(total, buf.len()));
    }
    let body = &buf[6..total];
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], SessionError> {
        if body.len() - *pos < n {
            return Err(WireError::Truncated { need: n, have: body.len() - *pos }.into());
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let batch = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let nframes = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if nframes > 1 << 20 {
        return Err(WireError::BadPayload("frame count").into());
    }
    let mut frames = Vec::with_capacity(nframes as usize);
    for _ in 0..nframes {
        let flen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        frames.push(take(&mut pos, flen)?.to_vec());
    }
    let qflag = take(&mut pos, 1)?[0];
    let qbatch = match qflag {
        0 => None,
        1 => {
            let start_slot = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let phase_setpoint =
                f64::from_bits(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            let vacuum = take(&mut pos, 1)?[0] != 0;
            let slen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let symbols = take(&mut pos, slen)?.to_vec();
            if symbols.iter().any(|&s| s > 2) {
                return Err(WireError::BadPayload("symbol code").into());
            }
            Some(QBatch { start_slot, phase_setpoint, vacuum, symbols })
        }
        _ => return Err(WireError::BadPayload("qbatch flag").into()),
    };
    if pos != body.len() {
        return Err(WireError::BadPayload("phys trailing bytes").into());
    }
    Ok((Bundle { batch, frames, qbatch }, total))
}

// --- transports --------------------------------------------------------------

/// A byte-stream carrying physical-layer bundles.
pub trait BundleLink {
    fn send(&mut self, bundle: &Bundle) -> Result<(), SessionError>;
    fn recv(&mut self) -> Result<Bundle, SessionError>;
}

/// Socket transport used by the two-endpoint mode.
pub struct StreamLink<S: Read + Write> {
    stream: S,
    buf: Vec<u8>,
}

impl<S: Read + Write> StreamLink<S> {
    pub fn new(stream: S) -> Self {
        StreamLink { stream, buf: Vec::new() }
    }
}

impl<S: Read + Write> BundleLink for StreamLink<S> {
    fn send(&mut self, bundle: &Bundle) -> Result<(), SessionError> {
        let bytes = phys_encode(bundle);
        self.stream
            .write_all(&bytes)
            .map_err(|e| SessionError::Transport(e.to_string()))
    }

    fn recv(&mut self) -> Result<Bundle, SessionError> {
        loop {
            if self.buf.len() >= 6 {
                match phys_decode(&self.buf) {
                    Ok((bundle, used)) => {
                        self.buf.drain(..used);
                        return Ok(bundle);
                    }
                    Err(SessionError::Wire(crate::error::WireError::Truncated { .. })) => {}
                    Err(e) => return Err(e),
                }
            }
            let mut chunk = [0u8; 65536];
            let n = self
                .stream
                .read(&mut chunk)
                .map_err(|e| SessionError::Transport(e.to_string()))?;
            if n == 0 {
                return Err(SessionError::Transport("peer closed".into()));
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }
}

/// Run both endpoints in-process with deterministic interleaving.
pub fn run_in_process(
    params: &SystemParams,
    n_slots: u64,
) -> Result<(EndpointReport, EndpointReport), SessionError> {
    let sched = Schedule::from_params(params, n_slots);
    let mut alice = AliceEndpoint::new(params, sched)?;
    let mut bob = BobEndpoint::new(params, sched)?;
    for k in 0..sched.n_batches {
        let a_bundle = alice.step(k)?;
        bob.accept_bundle(a_bundle);
        let b_bundle = bob.step(k)?;
        alice.accept_bundle(b_bundle);
    }
    Ok((alice.finish(), bob.finish()))
}

/// Drive the Alice endpoint over a transport (two-endpoint mode).
pub fn run_alice_over<L: BundleLink>(
    params: &SystemParams,
    n_slots: u64,
    link: &mut L,
) -> Result<EndpointReport, SessionError> {
    let sched = Schedule::from_params(params, n_slots);
    let mut alice = AliceEndpoint::new(params, sched)?;
    for k in 0..sched.n_batches {
        let bundle = alice.step(k)?;
        link.send(&bundle)?;
        let from_bob = link.recv()?;
        alice.accept_bundle(from_bob);
    }
    Ok(alice.finish())
}

/// Drive the Bob endpoint over a transport (two-endpoint mode).
pub fn run_bob_over<L: BundleLink>(
    params: &SystemParams,
    n_slots: u64,
    link: &mut L,
) -> Result<EndpointReport, SessionError> {
    let sched = Schedule::from_params(params, n_slots);
    let mut bob = BobEndpoint::new(params, sched)?;
    for k in 0..sched.n_batches {
        let from_alice = link.recv()?;
        bob.accept_bundle(from_alice);
        let bundle = bob.step(k)?;
        link.send(&bundle)?;
    }
    Ok(bob.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phys_roundtrip() {
        let bundle = Bundle {
            batch: 42,
            frames: vec![vec![1, 2, 3], vec![], vec![0xC0, 9, 1, 0, 0, 0, 2]],
            qbatch: Some(QBatch {
                start_slot: 65536,
                phase_setpoint: 0.25,
                vacuum: false,
                symbols: vec![0, 1, 2, 1, 0],
            }),
        };
        let bytes = phys_encode(&bundle);
        let (back, used) = phys_decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, bundle);

        let empty = Bundle { batch: 0, frames: vec![], qbatch: None };
        let bytes = phys_encode(&empty);
        assert_eq!(phys_decode(&bytes).unwrap().0, empty);
    }

    #[test]
    fn phys_rejects_garbage() {
        assert!(phys_decode(&[0xC0, 0, 0, 0, 0, 0]).is_err());
        assert!(phys_decode(&[0xC1, 7, 0, 0, 0, 0]).is_err());
        // Bad symbol code.
        let bundle = Bundle {
            batch: 1,
            frames: vec![],
            qbatch: Some(QBatch {
                start_slot: 0,
                phase_setpoint: 0.0,
                vacuum: false,
                symbols: vec![3],
            }),
        };
        let bytes = phys_encode(&bundle);
        assert!(phys_decode(&bytes).is_err());
    }

    #[test]
    fn inbox_applies_latency() {
        let mut inbox = Inbox::default();
        inbox.accept(0, vec![vec![1]], 8);
        inbox.accept(1, vec![vec![2]], 8);
        assert!(inbox.drain_ready(7).is_empty());
        let ready = inbox.drain_ready(8);
        assert_eq!(ready.len(), 1);
        assert_eq!(ready[0].1, vec![1]);
        assert_eq!(inbox.drain_ready(9).len(), 1);
    }
}
