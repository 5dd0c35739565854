//! Bob: receiver physics, detection bookkeeping, announcements, and the
//! correcting side of distillation.
//!
//! The detector loops use geometric slot-skipping: candidate slots arrive as
//! a Bernoulli(p_ub) thinning process and are accepted with probability
//! p(slot)/p_ub, which reproduces independent per-slot Bernoulli trials
//! exactly while skipping the empty stretches that dominate long-distance
//! runs.

use std::collections::VecDeque;

use crate::distill::auth::{verify_hash50, AuthKeyPool};
use crate::distill::cascade::CascadeSide;
use crate::distill::toeplitz::{privacy_amplify, ToeplitzSpec};
use crate::distill::KeyBlock;
use crate::error::SessionError;
use crate::params::SystemParams;
use crate::randomness::Symbol;
use crate::receiver::{monitor_mean, Cause, COUPLER_DATA_FRACTION, COUPLER_MONITOR_FRACTION};
use crate::rng::{streams, Rng};
use crate::session::engine::{Bundle, Inbox, QBatch, Schedule};
use crate::session::init::{align_offsets, alignment_pattern, tune_window, window_gain};
use crate::session::{Counters, EndpointReport, SessionEvent, SessionPhase, VisEstimate};
use crate::wire::{restart_reason, ClassicalMessage, Frame, VisReport};

const DM_FIFO_CAP: usize = 1 << 16;

/// Per-detector thinning sampler.
struct Sampler {
    rng: Rng,
    p_ub: f64,
    next_candidate: u64,
    blocked_until: u64,
    ap_sources: VecDeque<u64>,
    a0: f64,
    q: f64,
    dead_slots: u64,
    p_dark: f64,
    eta: f64,
}

impl Sampler {
    fn new(rng: Rng, eta: f64, p_dark: f64, a0: f64, q: f64, dead_slots: u64, p_max_sig: f64) -> Self {
        let p_ub = (p_max_sig + p_dark + 1.1 * a0 + 1e-12).min(0.999_999);
        let mut s = Sampler {
            rng,
            p_ub,
            next_candidate: 0,
            blocked_until: 0,
            ap_sources: VecDeque::new(),
            a0,
            q,
            dead_slots,
            p_dark,
            eta,
        };
        s.next_candidate = s.rng.geometric_gap(s.p_ub) - 1;
        s
    }

    #[inline]
    fn hazard(&mut self, slot: u64) -> f64 {
        if self.a0 == 0.0 {
            return 0.0;
        }
        while let Some(&start) = self.ap_sources.front() {
            if slot >= start && self.a0 * self.q.powi((slot - start) as i32) < 1e-15 {
                self.ap_sources.pop_front();
            } else {
                break;
            }
        }
        let mut survive = 1.0;
        for &start in &self.ap_sources {
            if slot >= start {
                survive *= 1.0 - self.a0 * self.q.powi((slot - start) as i32);
            }
        }
        1.0 - survive
    }

    /// Collect clicks in `[start, end)`. `mean_photons(slot)` returns the
    /// mean photon number arriving at this detector in that slot.
    fn collect(
        &mut self,
        start: u64,
        end: u64,
        mut mean_photons: impl FnMut(u64) -> f64,
        mut on_click: impl FnMut(u64, Cause),
    ) {
        if self.next_candidate < start {
            // Candidates before this batch can only exist after a reset;
            // fast-forward preserves the geometric process by memorylessness.
            self.next_candidate = start + self.rng.geometric_gap(self.p_ub) - 1;
        }
        while self.next_candidate < end {
            let c = self.next_candidate;
            self.next_candidate = c + self.rng.geometric_gap(self.p_ub);
            if c < self.blocked_until {
                continue;
            }
            let p_ap = self.hazard(c);
            let p_sig = -(-self.eta * mean_photons(c)).exp_m1();
            let p_tot = 1.0 - (1.0 - p_sig) * (1.0 - self.p_dark) * (1.0 - p_ap);
            debug_assert!(p_tot <= self.p_ub + 1e-12, "thinning bound violated");
            if self.rng.next_f64() * self.p_ub >= p_tot {
                continue;
            }
            let u = self.rng.next_f64() * p_tot;
            let cause = if u < p_sig {
                Cause::Signal
            } else if u < p_sig + (1.0 - p_sig) * self.p_dark {
                Cause::Dark
            } else {
                Cause::Afterpulse
            };
            self.blocked_until = c + self.dead_slots.max(1);
            if self.a0 > 0.0 {
                self.ap_sources.push_back(self.blocked_until);
                if self.ap_sources.len() > 4 {
                    self.ap_sources.pop_front();
                }
            }
            on_click(c, cause);
        }
    }
}

/// Precomputed per-slot intensities at the two detector inputs.
struct IntensityTables {
    /// [symbol][parity] mean photons at the data detector.
    data: [[f64; 2]; 3],
    /// [symbol][parity] mean photons at the monitor interferometer input.
    monitor: [[f64; 2]; 3],
    max_data: f64,
    max_monitor_mean: f64,
}

impl IntensityTables {
    fn new(params: &SystemParams) -> Self {
        let chain = params.channel.link.transmission * params.receiver.insertion_transmission();
        let mon_path = params.receiver.monitor_path_transmission();
        let mut data = [[0.0; 2]; 3];
        let mut monitor = [[0.0; 2]; 3];
        let mut max_data: f64 = 0.0;
        let mut max_mon: f64 = 0.0;
        for sym in 0..3u8 {
            for parity in 0..2u64 {
                let emitted = params.emitter.slot_intensity(Symbol::from_u8(sym), parity);
                let at_bob = emitted * chain;
                data[sym as usize][parity as usize] = at_bob * COUPLER_DATA_FRACTION;
                monitor[sym as usize][parity as usize] =
                    at_bob * COUPLER_MONITOR_FRACTION * mon_path;
                max_data = max_data.max(data[sym as usize][parity as usize]);
                max_mon = max_mon.max(monitor[sym as usize][parity as usize]);
            }
        }
        IntensityTables {
            data,
            monitor,
            max_data,
            // Constructive fringe bound: (I+I)/4 + I/2 = I.
            max_monitor_mean: max_mon,
        }
    }
}

#[derive(Debug)]
enum BlockState {
    AwaitSeeds { seeds: [Option<u64>; 3], q: f64 },
    Cascading(Box<CascadeSide>),
    AwaitVerify(Vec<u8>),
    AwaitPa(Vec<u8>),
}

#[derive(Debug)]
struct BobBlock {
    bits: Vec<u8>,
    first_slot: u64,
    last_slot: u64,
    q_estimate: f64,
    state: BlockState,
}

struct PendingWindow {
    wend: u64,
    announced: Vec<u64>,
}

struct ScanState {
    start_batch: u64,
    dwell_batches: u64,
    n_points: u32,
    clicks: u64,
    slots: u64,
    point: u32,
}

struct AlignState {
    pattern_seed: u32,
    pattern_slots: u32,
    start_batch: u64,
    retries: u32,
}

pub struct BobEndpoint {
    params: SystemParams,
    sched: Schedule,
    phase: SessionPhase,
    inbox: Inbox,
    staged: Vec<Vec<u8>>,
    pending_qbatch: Option<QBatch>,
    tables: IntensityTables,
    data_det: Sampler,
    mon_det: Sampler,
    gain: f64,
    prev_intensity_mon: f64,
    delay_true: u64,
    offset: u64,
    fifo: Vec<u64>,
    fifo_cap: usize,
    dm_fifo: Vec<u64>,
    last_pushed_label: Option<u64>,
    last_announced: i128,
    pending_windows: VecDeque<PendingWindow>,
    kept_counter: u64,
    blocks_frozen: u64,
    current_block: Vec<u8>,
    block_first_slot: u64,
    block_last_slot: u64,
    blocks_inflight: VecDeque<(u64, BobBlock)>,
    pool_verify: AuthKeyPool,
    pool_sign: AuthKeyPool,
    scan: Option<ScanState>,
    align: Option<AlignState>,
    align_detections: Vec<u64>,
    tune_counts: Vec<(f64, u64)>,
    /// (first dwell batch, batches per dwell, dwell count) of the window
    /// tuning schedule.
    tune_dwell_grid: (u64, u64, u64),
    align_compute_batch: u64,
    latest_vis: Option<VisEstimate>,
    latest_qber: Option<f64>,
    counters: Counters,
    log: Vec<SessionEvent>,
    sifted_stream: Vec<u8>,
    sample_stream: Vec<u8>,
    blocks: Vec<KeyBlock>,
    final_key: Vec<u8>,
    exchanging_slots: u64,
    halted: Option<&'static str>,
}

impl BobEndpoint {
    pub fn new(params: &SystemParams, sched: Schedule) -> Result<Self, SessionError> {
        let tables = IntensityTables::new(params);
        let slot_rate = params.slot_rate();
        let d = &params.receiver.data_detector;
        let m = &params.receiver.monitor_detector;
        let (a0_d, q_d) = d.afterpulse_slot_params(slot_rate);
        let (a0_m, q_m) = m.afterpulse_slot_params(slot_rate);
        let data_det = Sampler::new(
            Rng::derive(params.seed, streams::BOB_DATA_DET),
            d.efficiency,
            d.dark_per_slot(slot_rate),
            a0_d,
            q_d,
            d.dead_slots(slot_rate),
            -(-d.efficiency * tables.max_data).exp_m1(),
        );
        let mon_det = Sampler::new(
            Rng::derive(params.seed, streams::BOB_MON_DET),
            m.efficiency,
            m.dark_per_slot(slot_rate),
            a0_m,
            q_m,
            m.dead_slots(slot_rate),
            -(-m.efficiency * tables.max_monitor_mean).exp_m1(),
        );
        let pre = params.protocol.pre_aligned;
        let phase = if pre { SessionPhase::Exchanging } else { SessionPhase::InitAlign };
        let mut log = Vec::new();
        log.push(SessionEvent::PhaseChange { batch: 0, phase });
        Ok(BobEndpoint {
            phase,
            inbox: Inbox::default(),
            staged: Vec::new(),
            pending_qbatch: None,
            data_det,
            mon_det,
            gain: 1.0,
            prev_intensity_mon: 0.0,
            delay_true: params.channel.delay_slots,
            offset: if pre { params.channel.delay_slots } else { 0 },
            fifo: Vec::new(),
            fifo_cap: params
                .protocol
                .announce_fifo_capacity
                .map(|c| c as usize)
                .unwrap_or(usize::MAX),
            dm_fifo: Vec::new(),
            last_pushed_label: None,
            last_announced: -1,
            pending_windows: VecDeque::new(),
            kept_counter: 0,
            blocks_frozen: 0,
            current_block: Vec::new(),
            block_first_slot: 0,
            block_last_slot: 0,
            blocks_inflight: VecDeque::new(),
            pool_verify: AuthKeyPool::from_seed(params.seed ^ 0x5a5a, params.protocol.auth_pool_bits),
            pool_sign: AuthKeyPool::from_seed(params.seed, params.protocol.auth_pool_bits),
            scan: None,
            align: None,
            align_detections: Vec::new(),
            tune_counts: Vec::new(),
            tune_dwell_grid: (0, 1, 0),
            align_compute_batch: u64::MAX,
            latest_vis: None,
            latest_qber: None,
            counters: Counters::default(),
            log,
            sifted_stream: Vec::new(),
            sample_stream: Vec::new(),
            blocks: Vec::new(),
            final_key: Vec::new(),
            exchanging_slots: 0,
            halted: None,
            tables,
            sched,
            params: params.clone(),
        })
    }

    pub fn accept_bundle(&mut self, bundle: Bundle) {
        if let Some(q) = bundle.qbatch {
            self.pending_qbatch = Some(q);
        }
        self.inbox.accept(bundle.batch, bundle.frames, self.sched.delta);
    }

    fn set_phase(&mut self, batch: u64, phase: SessionPhase) {
        if self.phase != phase {
            self.phase = phase;
            self.log.push(SessionEvent::PhaseChange { batch, phase });
        }
    }

    fn halt(&mut self, batch: u64, reason: &'static str) {
        if self.halted.is_none() {
            self.halted = Some(reason);
            self.log.push(SessionEvent::Halt { batch, reason });
            self.set_phase(batch, SessionPhase::Halted);
        }
    }

    pub fn step(&mut self, k: u64) -> Result<Bundle, SessionError> {
        self.staged.clear();
        for (sent, bytes) in self.inbox.drain_ready(k) {
            if self.halted.is_some() {
                break;
            }
            self.handle_frame(k, sent, &bytes)?;
        }
        let qbatch = self.pending_qbatch.take();
        if let Some(q) = qbatch {
            if self.halted.is_none() {
                self.ingest_qbatch(k, &q);
            }
        }
        if self.halted.is_none() {
            self.end_of_batch(k);
        }
        Ok(Bundle { batch: k, frames: std::mem::take(&mut self.staged), qbatch: None })
    }

    // --- physics ------------------------------------------------------------

    fn ingest_qbatch(&mut self, k: u64, q: &QBatch) {
        let start = q.start_slot;
        let end = start + 2 * q.symbols.len() as u64;
        if self.phase == SessionPhase::Exchanging {
            self.exchanging_slots += end - start;
        }
        let slot_rate = self.params.slot_rate();
        let vacuum = q.vacuum;
        let gain = self.gain;

        // Data line.
        let mut data_clicks: Vec<u64> = Vec::new();
        {
            let tables = &self.tables;
            let symbols = &q.symbols;
            let mean = |slot: u64| -> f64 {
                if vacuum {
                    return 0.0;
                }
                let idx = ((slot - start) / 2) as usize;
                let parity = (slot & 1) as usize;
                gain * tables.data[symbols[idx] as usize][parity]
            };
            self.data_det.collect(start, end, mean, |slot, _cause| {
                data_clicks.push(slot);
            });
        }

        // Monitor line: the interferometer overlaps slots k-1 and k.
        let mut mon_clicks: Vec<u64> = Vec::new();
        {
            let tables = &self.tables;
            let symbols = &q.symbols;
            let channel = &self.params.channel;
            let prev_edge = self.prev_intensity_mon;
            let phase_set = q.phase_setpoint;
            let mean = |slot: u64| -> f64 {
                let i_cur = if vacuum {
                    0.0
                } else {
                    let idx = ((slot - start) / 2) as usize;
                    tables.monitor[symbols[idx] as usize][(slot & 1) as usize]
                };
                let i_prev = if slot == start {
                    prev_edge
                } else if vacuum {
                    0.0
                } else {
                    let p = slot - 1;
                    let idx = ((p - start) / 2) as usize;
                    tables.monitor[symbols[idx] as usize][(p & 1) as usize]
                };
                let t = slot as f64 / slot_rate;
                let v = channel.effective_visibility(t);
                let phi = phase_set - channel.phase_offset - channel.drift_phase(t);
                monitor_mean(i_prev, i_cur, v, phi)
            };
            self.mon_det.collect(start, end, mean, |slot, _cause| {
                mon_clicks.push(slot);
            });
        }
        self.prev_intensity_mon = if vacuum || q.symbols.is_empty() {
            0.0
        } else {
            let last = end - 1;
            let idx = ((last - start) / 2) as usize;
            self.tables.monitor[q.symbols[idx] as usize][(last & 1) as usize]
        };

        match self.phase {
            SessionPhase::Exchanging => {
                for s in data_clicks {
                    self.push_data_click(s);
                }
                for s in mon_clicks {
                    let label = (s + self.delay_true) as i128 - self.offset as i128;
                    if label >= 0 && self.dm_fifo.len() < DM_FIFO_CAP {
                        self.dm_fifo.push(label as u64);
                    }
                }
            }
            SessionPhase::InitAlign => {
                for s in data_clicks {
                    if self.align_detections.len() < 1 << 20 {
                        self.align_detections.push(s + self.delay_true);
                    }
                }
            }
            SessionPhase::InitWindow => {
                if k >= self.tune_dwell_grid.0 {
                    if let Some(last) = self.tune_counts.last_mut() {
                        last.1 += data_clicks.len() as u64;
                    }
                }
            }
            SessionPhase::Realigning => {
                if let Some(scan) = self.scan.as_mut() {
                    if k >= scan.start_batch {
                        scan.clicks += mon_clicks.len() as u64;
                        scan.slots += end - start;
                    }
                }
            }
            SessionPhase::Halted => {}
        }
    }

    fn push_data_click(&mut self, slot: u64) {
        let label = (slot + self.delay_true) as i128 - self.offset as i128;
        if label < 0 {
            return;
        }
        let label = label as u64;
        // Both slots of one frame clicking is contradictory; drop the pair.
        if let Some(prev) = self.last_pushed_label {
            if label == prev + 1 && label % 2 == 1 {
                if self.fifo.last() == Some(&prev) {
                    self.fifo.pop();
                }
                self.counters.double_clicks_discarded += 1;
                self.last_pushed_label = Some(label);
                return;
            }
        }
        self.last_pushed_label = Some(label);
        if self.fifo.len() < self.fifo_cap {
            self.fifo.push(label);
        } else {
            self.counters.fifo_dropped += 1;
        }
    }

    // --- per-batch bookkeeping ------------------------------------------------

    fn end_of_batch(&mut self, k: u64) {
        match self.phase {
            SessionPhase::Exchanging => {
                if k % self.sched.period == 0 {
                    self.announce(k);
                }
            }
            SessionPhase::InitAlign => {
                if k + 1 == self.align_compute_batch {
                    self.finish_alignment(k);
                }
            }
            SessionPhase::InitWindow => {
                self.window_dwell_bookkeeping(k);
            }
            SessionPhase::Realigning => {
                self.scan_dwell_bookkeeping(k);
            }
            SessionPhase::Halted => {}
        }
    }

    fn announce(&mut self, k: u64) {
        let wend_raw = (k + 1) * self.sched.batch_slots - 1 + self.delay_true;
        let wend = wend_raw.saturating_sub(self.offset);
        let indices = std::mem::take(&mut self.fifo);
        let dm = std::mem::take(&mut self.dm_fifo);
        self.counters.announced += indices.len() as u64;
        self.counters.dm_announced += dm.len() as u64;
        if let Some(&first) = indices.first() {
            debug_assert!((first as i128) > self.last_announced);
        }
        if let Some(&last) = indices.last() {
            self.last_announced = last as i128;
        }
        self.pending_windows.push_back(PendingWindow { wend, announced: indices.clone() });
        self.stage(ClassicalMessage::DetectAnnounce { indices });
        self.stage(ClassicalMessage::DmAnnounce { indices: dm });
    }

    fn finish_alignment(&mut self, k: u64) {
        let Some(al) = self.align.as_ref() else {
            self.halt(k, "alignment schedule without pattern spec");
            return;
        };
        let pattern = alignment_pattern(al.pattern_seed, al.pattern_slots as usize);
        // Detections are raw receiver slots; rebase onto the pattern start so
        // the recovered lag is the quantum-path delay itself.
        let pattern_start = al.start_batch * self.sched.batch_slots;
        let rel: Vec<u64> = self
            .align_detections
            .iter()
            .filter(|&&r| r >= pattern_start)
            .map(|&r| r - pattern_start)
            .collect();
        let found =
            align_offsets(&pattern, &rel, self.params.protocol.align_max_lag as u64).ok();
        match found {
            Some(offset) => {
                self.offset = offset;
                self.log.push(SessionEvent::AlignmentFound { batch: k, offset });
                self.stage(ClassicalMessage::SyncPattern {
                    role: 1,
                    pattern_seed: 0,
                    length_slots: 0,
                    result: offset,
                });
                // Window-tuning dwells start once the result has reached the
                // sender; both sides derive the same grid origin.
                let w0 = k + self.sched.delta + 1;
                self.begin_window_phase(k, w0);
            }
            None => {
                let retries = self.align.as_ref().map_or(0, |a| a.retries);
                self.stage(ClassicalMessage::SyncPattern {
                    role: 1,
                    pattern_seed: 0,
                    length_slots: 0,
                    result: u64::MAX,
                });
                if retries + 1 >= 3 {
                    self.halt(k, "alignment failed");
                } else if let Some(al) = self.align.as_mut() {
                    // Retry with a doubled pattern; the sender re-announces
                    // the spec, which re-arms the compute schedule.
                    al.retries += 1;
                    self.align_detections.clear();
                    self.align_compute_batch = u64::MAX;
                }
            }
        }
    }

    fn begin_window_phase(&mut self, k: u64, w0: u64) {
        let steps = (1.0 / self.params.protocol.tune_step).round() as u64 + 1;
        let dw = self
            .params
            .protocol
            .tune_dwell_slots
            .div_ceil(self.sched.batch_slots)
            .max(1);
        self.tune_dwell_grid = (w0, dw, steps);
        self.tune_counts = vec![(-0.5, 0)];
        self.gain = window_gain(-0.5, self.params.receiver.true_window_offset);
        self.set_phase(k, SessionPhase::InitWindow);
    }

    fn window_dwell_bookkeeping(&mut self, k: u64) {
        let (w0, dw, steps) = self.tune_dwell_grid;
        if k + 1 <= w0 {
            return;
        }
        let elapsed = k + 1 - w0;
        if elapsed % dw != 0 {
            return;
        }
        let done = elapsed / dw;
        if done < steps {
            let delay = -0.5 + done as f64 * self.params.protocol.tune_step;
            self.tune_counts.push((delay, 0));
            self.gain = window_gain(delay, self.params.receiver.true_window_offset);
        } else if done == steps {
            match tune_window(&self.tune_counts) {
                Ok(t) => {
                    self.gain = window_gain(t.delay, self.params.receiver.true_window_offset);
                    self.log.push(SessionEvent::WindowTuned {
                        batch: k,
                        delay: t.delay,
                        boundary_warning: t.boundary_warning,
                    });
                    // Wait for the sender's wavelength-scan kickoff.
                    self.set_phase(k, SessionPhase::Realigning);
                    self.scan = None;
                }
                Err(_) => self.halt(k, "window tuning failed"),
            }
        }
    }

    fn scan_dwell_bookkeeping(&mut self, k: u64) {
        let Some(scan) = self.scan.as_mut() else { return };
        if k + 1 <= scan.start_batch {
            return;
        }
        let elapsed = k + 1 - scan.start_batch;
        if elapsed % scan.dwell_batches == 0 {
            let point = scan.point;
            if point < scan.n_points {
                let clicks = scan.clicks;
                let slots = scan.slots;
                scan.clicks = 0;
                scan.slots = 0;
                scan.point += 1;
                self.stage_tagged(ClassicalMessage::VisReport(VisReport::ScanCounts {
                    point,
                    clicks,
                    opportunities: slots,
                }));
            }
        }
    }

    // --- classical frames -----------------------------------------------------

    fn handle_frame(&mut self, k: u64, _sent: u64, bytes: &[u8]) -> Result<(), SessionError> {
        let (frame, _used) = match Frame::decode(bytes) {
            Ok(f) => f,
            Err(_) => {
                self.desync(k, "undecodable frame");
                return Ok(());
            }
        };
        if frame.msg.msg_type().requires_tag() {
            let body = Frame::auth_bytes(&frame.msg);
            match self.pool_verify.verify(&body, &frame.tag.unwrap_or([0; 8])) {
                Ok(true) => {}
                Ok(false) => {
                    self.counters.auth_failures += 1;
                    self.halt(k, "authentication failure");
                    return Ok(());
                }
                Err(_) => {
                    self.halt(k, "authentication pool exhausted");
                    return Ok(());
                }
            }
        }
        match frame.msg {
            ClassicalMessage::SyncPattern { role: 0, pattern_seed, length_slots, result } => {
                // `result` carries the batch at which the pattern started,
                // so the compute point is schedule-exact on both sides.
                let pat_batches = (length_slots as u64).div_ceil(self.sched.batch_slots);
                self.align_compute_batch = (result + pat_batches).max(k + 1);
                self.align = Some(AlignState {
                    pattern_seed,
                    pattern_slots: length_slots,
                    start_batch: result,
                    retries: self.align.as_ref().map_or(0, |a| a.retries),
                });
            }
            ClassicalMessage::SyncPattern { .. } => {}
            ClassicalMessage::DecoyRemove { window_end_slot, remove } => {
                self.handle_decoy_remove(k, window_end_slot, &remove);
            }
            ClassicalMessage::EcShuffle { pass, block, seed, q_e5 } => {
                self.handle_shuffle(k, pass, block, seed, q_e5);
            }
            ClassicalMessage::EcParity { pass, block, parities } => {
                self.handle_cascade_round(k, pass, block, &parities.to_bits());
            }
            ClassicalMessage::AuthTag { block, hash, key } => {
                self.handle_verify(k, block, hash, key);
            }
            ClassicalMessage::PaSeed { n, m, seed_bits } => {
                self.handle_pa(k, n, m, &seed_bits.to_bits());
            }
            ClassicalMessage::VisReport(VisReport::Exchange {
                visibility,
                ci_low,
                ci_high,
                interfering_clicks,
                noninterfering_clicks,
                interfering_opportunities,
                sufficient,
            }) => {
                self.latest_vis = Some(VisEstimate {
                    visibility,
                    ci_low,
                    ci_high,
                    ci_high_strict: ci_high,
                    sufficient,
                    int_clicks: interfering_clicks,
                    ni_clicks: noninterfering_clicks,
                    int_opportunities: interfering_opportunities,
                });
            }
            ClassicalMessage::VisReport(VisReport::SampleQber { compared, mismatches }) => {
                if compared > 0 {
                    self.latest_qber = Some(mismatches as f64 / compared as f64);
                }
            }
            ClassicalMessage::VisReport(VisReport::ScanCounts { .. }) => {}
            ClassicalMessage::Restart { reason } => match reason {
                restart_reason::REALIGN => self.enter_realigning(k),
                restart_reason::RESUME => self.resume_exchanging(k),
                restart_reason::HALT => self.halt(k, "peer halt"),
                restart_reason::DESYNC => self.halt(k, "peer desync"),
                _ => self.halt(k, "unknown restart reason"),
            },
            ClassicalMessage::DetectAnnounce { .. } | ClassicalMessage::DmAnnounce { .. } => {
                self.desync(k, "announce from wrong direction");
            }
        }
        Ok(())
    }

    fn handle_decoy_remove(&mut self, k: u64, wend: u64, remove: &[u64]) {
        if self.phase != SessionPhase::Exchanging {
            return;
        }
        let Some(window) = self.pending_windows.pop_front() else {
            self.desync(k, "remove without pending window");
            return;
        };
        if window.wend != wend {
            self.desync(k, "window end mismatch");
            return;
        }
        let mut remove_iter = remove.iter().peekable();
        let mut sample_bits = Vec::new();
        let sampling_at_start = self.blocks_frozen == 0;
        for &label in &window.announced {
            if remove_iter.peek() == Some(&&label) {
                remove_iter.next();
                self.counters.decoys_removed += 1;
                continue;
            }
            let bit = if label % 2 == 0 { 1u8 } else { 0u8 };
            self.counters.sifted_kept += 1;
            let sampling = self.blocks_frozen == 0;
            if sampling && self.kept_counter % self.params.protocol.sample_inverse as u64 == 0 {
                sample_bits.push(bit);
                self.sample_stream.push(bit);
                self.counters.sampled += 1;
            } else {
                if self.current_block.is_empty() {
                    self.block_first_slot = label;
                }
                self.block_last_slot = label;
                self.current_block.push(bit);
                self.sifted_stream.push(bit);
                if self.current_block.len() == self.params.protocol.block_bits as usize {
                    self.freeze_block(k);
                }
            }
            self.kept_counter += 1;
        }
        if remove_iter.next().is_some() {
            self.desync(k, "remove index not announced");
            return;
        }
        if sampling_at_start {
            self.stage_tagged(ClassicalMessage::EcParity {
                pass: 0,
                block: wend,
                parities: crate::wire::BitsetPayload::from_bits(&sample_bits),
            });
        }
    }

    fn freeze_block(&mut self, k: u64) {
        let id = self.blocks_frozen;
        self.blocks_frozen += 1;
        self.counters.blocks_frozen += 1;
        let bits = std::mem::take(&mut self.current_block);
        self.log.push(SessionEvent::BlockFrozen {
            id,
            batch: k,
            first_slot: self.block_first_slot,
            last_slot: self.block_last_slot,
        });
        self.blocks_inflight.push_back((
            id,
            BobBlock {
                bits,
                first_slot: self.block_first_slot,
                last_slot: self.block_last_slot,
                q_estimate: 0.0,
                state: BlockState::AwaitSeeds { seeds: [None; 3], q: 0.0 },
            },
        ));
    }

    fn block_mut(&mut self, id: u64) -> Option<&mut BobBlock> {
        self.blocks_inflight
            .iter_mut()
            .find(|(bid, _)| *bid == id)
            .map(|(_, b)| b)
    }

    fn handle_shuffle(&mut self, _k: u64, pass: u8, block: u64, seed: u64, q_e5: u32) {
        let q = q_e5 as f64 / 1e5;
        let Some(b) = self.block_mut(block) else {
            return;
        };
        if let BlockState::AwaitSeeds { seeds, q: stored } = &mut b.state {
            if !(2..=4).contains(&pass) {
                return;
            }
            seeds[pass as usize - 2] = Some(seed);
            *stored = q;
            if seeds.iter().all(Option::is_some) {
                let arr = [seeds[0].unwrap(), seeds[1].unwrap(), seeds[2].unwrap()];
                b.q_estimate = q;
                let side = CascadeSide::correcting(b.bits.clone(), q, &arr);
                b.state = BlockState::Cascading(Box::new(side));
            }
        }
    }

    fn handle_cascade_round(&mut self, k: u64, pass: u8, block: u64, alice_parities: &[u8]) {
        enum Outcome {
            Missing,
            WrongState,
            BadLength,
            Reply(Vec<u8>),
        }
        let outcome = {
            match self.block_mut(block) {
                None => Outcome::Missing,
                Some(b) => match &mut b.state {
                    BlockState::Cascading(side) => {
                        let mine = side.round_parities();
                        if mine.len() != alice_parities.len() {
                            Outcome::BadLength
                        } else {
                            side.absorb_round(&mine, alice_parities);
                            if side.done() {
                                let corrected = side.bits.clone();
                                b.state = BlockState::AwaitVerify(corrected);
                            }
                            Outcome::Reply(mine)
                        }
                    }
                    _ => Outcome::WrongState,
                },
            }
        };
        match outcome {
            // Rounds for blocks aborted by a realign drain without effect.
            Outcome::Missing => {}
            Outcome::WrongState => self.desync(k, "parities in wrong block state"),
            Outcome::BadLength => self.desync(k, "parity round length mismatch"),
            Outcome::Reply(mine) => {
                self.stage_tagged(ClassicalMessage::EcParity {
                    pass,
                    block,
                    parities: crate::wire::BitsetPayload::from_bits(&mine),
                });
            }
        }
    }

    fn handle_verify(&mut self, k: u64, block: u64, hash: u64, key: u64) {
        let result = {
            match self.block_mut(block) {
                None => None,
                Some(b) => match &b.state {
                    BlockState::AwaitVerify(corrected) => {
                        let mine = verify_hash50(key, corrected);
                        let ok = mine == hash;
                        if ok {
                            let c = corrected.clone();
                            b.state = BlockState::AwaitPa(c);
                        }
                        Some((mine, ok))
                    }
                    _ => {
                        self.desync(k, "verify in wrong block state");
                        return;
                    }
                },
            }
        };
        let Some((mine, ok)) = result else {
            return;
        };
        self.counters.leak_hash_audit += u64::from(crate::distill::VERIFY_HASH_BITS);
        self.stage_tagged(ClassicalMessage::AuthTag { block, hash: mine, key });
        self.log.push(SessionEvent::BlockVerified { id: block, batch: k, ok });
        if !ok {
            self.counters.blocks_rejected += 1;
            self.finish_block_record(block, k, false, 0, 0.0);
        }
    }

    fn handle_pa(&mut self, k: u64, n: u32, m: u32, seed_bits: &[u8]) {
        // PA seeds carry no block id on the wire; verification is serialized
        // so exactly one block can be awaiting amplification.
        let Some((id, b)) = self
            .blocks_inflight
            .iter_mut()
            .find(|(_, b)| matches!(b.state, BlockState::AwaitPa(_)))
            .map(|(id, b)| (*id, b))
        else {
            self.desync(k, "pa seed without awaiting block");
            return;
        };
        let BlockState::AwaitPa(corrected) = &b.state else { unreachable!() };
        if corrected.len() != n as usize {
            self.desync(k, "pa dimensions mismatch");
            return;
        }
        let spec = match ToeplitzSpec::new(n as usize, m as usize, seed_bits.to_vec()) {
            Ok(s) => s,
            Err(_) => {
                self.desync(k, "pa seed length");
                return;
            }
        };
        let out = privacy_amplify(corrected, &spec).expect("dimensions checked");
        self.counters.blocks_ok += 1;
        self.counters.secret_bits += out.len() as u64;
        self.final_key.extend_from_slice(&out);
        self.log.push(SessionEvent::BlockEmitted { id, batch: k, bits: m });
        self.finish_block_record(id, k, true, m, 0.0);
    }

    fn finish_block_record(&mut self, id: u64, _batch: u64, verified: bool, m: u32, _q: f64) {
        if let Some(pos) = self.blocks_inflight.iter().position(|(bid, _)| *bid == id) {
            let (_, b) = self.blocks_inflight.remove(pos).unwrap();
            let vis = self.latest_vis;
            self.blocks.push(KeyBlock {
                id,
                n: b.bits.len() as u32,
                q_estimate: b.q_estimate,
                corrections: 0,
                leak_ec: 0,
                verified,
                m,
                visibility: vis.map_or(f64::NAN, |v| v.visibility),
                vis_sufficient: vis.is_some_and(|v| v.sufficient),
                first_slot: b.first_slot,
                last_slot: b.last_slot,
            });
        }
    }

    fn enter_realigning(&mut self, k: u64) {
        let retrying = self.scan.is_some();
        self.set_phase(k, SessionPhase::Realigning);
        self.fifo.clear();
        self.dm_fifo.clear();
        self.pending_windows.clear();
        self.current_block.clear();
        // Abort every block that has not completed privacy amplification.
        while let Some((id, _)) = self.blocks_inflight.pop_front() {
            self.counters.blocks_aborted += 1;
            self.log.push(SessionEvent::BlockAborted { id, batch: k });
        }
        let base_dwell = self
            .params
            .protocol
            .scan_dwell_slots
            .div_ceil(self.sched.batch_slots);
        let dwell = if retrying {
            self.scan.as_ref().map_or(base_dwell, |s| s.dwell_batches * 2)
        } else {
            base_dwell
        };
        self.scan = Some(ScanState {
            start_batch: k + 1,
            dwell_batches: dwell.max(1),
            n_points: self.params.protocol.scan_points + 1,
            clicks: 0,
            slots: 0,
            point: 0,
        });
        self.counters.scans += 1;
    }

    fn resume_exchanging(&mut self, k: u64) {
        self.scan = None;
        self.last_pushed_label = None;
        self.set_phase(k, SessionPhase::Exchanging);
    }

    fn desync(&mut self, k: u64, reason: &'static str) {
        self.log.push(SessionEvent::Desync { batch: k, reason });
        self.stage(ClassicalMessage::Restart { reason: restart_reason::DESYNC });
        self.halt(k, reason);
    }

    fn stage(&mut self, msg: ClassicalMessage) {
        debug_assert!(!msg.msg_type().requires_tag());
        self.staged.push(Frame::untagged(msg).encode());
    }

    fn stage_tagged(&mut self, msg: ClassicalMessage) {
        debug_assert!(msg.msg_type().requires_tag());
        let body = Frame::auth_bytes(&msg);
        match self.pool_sign.authenticate(&body) {
            Ok(tag) => self.staged.push(Frame { msg, tag: Some(tag) }.encode()),
            Err(_) => {
                // Halt before anything unauthenticated could leave.
                self.halt(u64::MAX, "authentication pool exhausted");
            }
        }
    }

    pub fn finish(self) -> EndpointReport {
        EndpointReport {
            counters: self.counters,
            log: self.log,
            sifted_stream: self.sifted_stream,
            sample_stream: self.sample_stream,
            blocks: self.blocks,
            final_key: self.final_key,
            last_vis: self.latest_vis,
            qber_estimate: self.latest_qber,
            exchanging_slots: self.exchanging_slots,
            total_slots: self.sched.total_slots(),
            halted: self.halted,
        }
    }
}
