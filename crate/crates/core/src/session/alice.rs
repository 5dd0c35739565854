//! Alice: symbol source, pre-sifting, decoy removal, visibility watchdog,
//! wavelength tracking, and the reference side of distillation.

use std::collections::VecDeque;

use crate::distill::auth::{verify_hash50, AuthKeyPool};
use crate::distill::cascade::CascadeSide;
use crate::distill::toeplitz::{privacy_amplify, ToeplitzSpec};
use crate::distill::{compute_output_length, KeyBlock, VERIFY_HASH_BITS};
use crate::error::SessionError;
use crate::params::SystemParams;
use crate::randomness::{SeedSource, Symbol, SymbolStream};
use crate::rng::{streams, Rng};
use crate::security::eve_information;
use crate::session::engine::{Bundle, Inbox, QBatch, Schedule};
use crate::session::init::{alignment_symbols, fit_fringe, ScanPoint};
use crate::session::{
    estimate_visibility, Counters, EndpointReport, SessionEvent, SessionPhase, VisEstimate,
    VisWindow,
};
use crate::wire::{restart_reason, BitsetPayload, ClassicalMessage, Frame, VisReport};

#[derive(Debug)]
enum AliceBlockState {
    Cascading { last_sent: Vec<u8> },
    AwaitVerifyReply { hash: u64 },
    QueuedForVerify,
}

struct AliceBlock {
    bits: Vec<u8>,
    side: CascadeSide,
    state: AliceBlockState,
    first_slot: u64,
    last_slot: u64,
    q_estimate: f64,
    visibility: f64,
    vis_sufficient: bool,
    verify_key: u64,
}

struct AliceScan {
    start_batch: u64,
    dwell_batches: u64,
    phases: Vec<f64>,
    /// Reported (clicks, slots) per dwell, dark dwell first.
    reports: Vec<Option<(u64, u64)>>,
    /// Interfering / non-interfering opportunities Alice counted per dwell.
    opportunities: Vec<(u64, u64)>,
    retries: u32,
}

pub struct AliceEndpoint {
    params: SystemParams,
    sched: Schedule,
    phase: SessionPhase,
    inbox: Inbox,
    staged: Vec<Vec<u8>>,
    stream: SymbolStream,
    /// Retained symbols (one byte per frame) from `ring_base_frame` on.
    ring: VecDeque<u8>,
    ring_base_frame: u64,
    gen_end_slot: u64,
    gen_prev_full: bool,
    /// Monitor-position class counts per generated batch:
    /// (batch, interfering, single-arm, empty-empty).
    batch_classes: VecDeque<(u64, u32, u32, u32)>,
    /// Opportunity counts before this batch do not correspond to peer
    /// collection windows (set on every exchange (re)start).
    vis_valid_from_batch: u64,
    phi_set: f64,
    // Initialization state.
    pattern_seed: u32,
    pattern_start_batch: u64,
    pattern_symbols: Vec<Symbol>,
    align_retries: u32,
    window_end_batch: u64,
    scan: Option<AliceScan>,
    pub security_unverified: bool,
    // Exchange state.
    pending_detect: Option<Vec<u64>>,
    last_wend: i128,
    last_detect_label: i128,
    last_dm_label: i128,
    kept_counter: u64,
    blocks_frozen: u64,
    current_block: Vec<u8>,
    block_first_slot: u64,
    block_last_slot: u64,
    sample_pending: VecDeque<(u64, Vec<u8>)>,
    q_from_blocks: Option<f64>,
    vis_history: VecDeque<VisWindow>,
    latest_vis: Option<VisEstimate>,
    // Wavelength-tracking controller.
    ctl_rounds: u32,
    ctl_sign: f64,
    ctl_plus: (u64, u64),
    ctl_minus: (u64, u64),
    // Distillation.
    blocks_inflight: VecDeque<(u64, AliceBlock)>,
    /// Cascade kickoffs staged after this window's DECOY_REMOVE so the peer
    /// freezes the block before its first messages arrive.
    pending_kickoffs: Vec<(u64, [u64; 3], u32, u8, Vec<u8>)>,
    verify_outstanding: Option<u64>,
    rng_shuffle: Rng,
    rng_pa: Rng,
    pool_sign: AuthKeyPool,
    pool_verify: AuthKeyPool,
    counters: Counters,
    log: Vec<SessionEvent>,
    sifted_stream: Vec<u8>,
    sample_stream: Vec<u8>,
    blocks: Vec<KeyBlock>,
    final_key: Vec<u8>,
    exchanging_slots: u64,
    halted: Option<&'static str>,
}

impl AliceEndpoint {
    pub fn new(params: &SystemParams, sched: Schedule) -> Result<Self, SessionError> {
        let stream = SymbolStream::new(
            SeedSource::generator(Rng::derive(params.seed, streams::ALICE_QRNG)),
            params.reseed_interval_symbols,
            params.decoy_rule,
            Rng::derive(params.seed, streams::ALICE_QRNG ^ 0xff),
        );
        let pre = params.protocol.pre_aligned;
        let phase = if pre { SessionPhase::Exchanging } else { SessionPhase::InitAlign };
        let mut log = Vec::new();
        log.push(SessionEvent::PhaseChange { batch: 0, phase });
        Ok(AliceEndpoint {
            sched,
            phase,
            inbox: Inbox::default(),
            staged: Vec::new(),
            stream,
            ring: VecDeque::new(),
            ring_base_frame: 0,
            gen_end_slot: 0,
            gen_prev_full: false,
            batch_classes: VecDeque::new(),
            vis_valid_from_batch: 0,
            phi_set: if pre { params.channel.phase_offset } else { 0.0 },
            pattern_seed: (params.seed as u32) ^ 0x51ac,
            pattern_start_batch: 0,
            pattern_symbols: Vec::new(),
            align_retries: 0,
            window_end_batch: u64::MAX,
            scan: None,
            security_unverified: false,
            pending_detect: None,
            last_wend: -1,
            last_detect_label: -1,
            last_dm_label: -1,
            kept_counter: 0,
            blocks_frozen: 0,
            current_block: Vec::new(),
            block_first_slot: 0,
            block_last_slot: 0,
            sample_pending: VecDeque::new(),
            q_from_blocks: None,
            vis_history: VecDeque::new(),
            latest_vis: None,
            ctl_rounds: 0,
            ctl_sign: 1.0,
            ctl_plus: (0, 0),
            ctl_minus: (0, 0),
            blocks_inflight: VecDeque::new(),
            pending_kickoffs: Vec::new(),
            verify_outstanding: None,
            rng_shuffle: Rng::derive(params.seed, streams::EC_SHUFFLE),
            rng_pa: Rng::derive(params.seed, streams::PA_SEED),
            pool_sign: AuthKeyPool::from_seed(params.seed ^ 0x5a5a, params.protocol.auth_pool_bits),
            pool_verify: AuthKeyPool::from_seed(params.seed, params.protocol.auth_pool_bits),
            counters: Counters::default(),
            log,
            sifted_stream: Vec::new(),
            sample_stream: Vec::new(),
            blocks: Vec::new(),
            final_key: Vec::new(),
            exchanging_slots: 0,
            halted: None,
            params: params.clone(),
        })
    }

    pub fn accept_bundle(&mut self, bundle: Bundle) {
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
        if k == 0 && !self.params.protocol.pre_aligned {
            self.begin_alignment(0);
        }
        for (sent, bytes) in self.inbox.drain_ready(k) {
            if self.halted.is_some() {
                break;
            }
            self.handle_frame(k, sent, &bytes)?;
        }
        if self.halted.is_none() {
            self.phase_actions(k);
        }
        let qbatch = self.generate(k);
        Ok(Bundle { batch: k, frames: std::mem::take(&mut self.staged), qbatch: Some(qbatch) })
    }

    // --- initialization -------------------------------------------------------

    fn begin_alignment(&mut self, start_batch: u64) {
        let slots = self.params.protocol.align_pattern_slots << self.align_retries;
        self.pattern_symbols = alignment_symbols(self.pattern_seed, (slots as usize).div_ceil(2));
        self.pattern_start_batch = start_batch;
        self.set_phase(start_batch, SessionPhase::InitAlign);
        self.stage(ClassicalMessage::SyncPattern {
            role: 0,
            pattern_seed: self.pattern_seed,
            length_slots: slots,
            result: start_batch,
        });
    }

    fn phase_actions(&mut self, k: u64) {
        if self.phase == SessionPhase::InitWindow && k + 1 == self.window_end_batch {
            // Tuning done on the receiver; kick off the wavelength scan.
            self.start_scan(k, 0);
        }
    }

    fn start_scan(&mut self, k: u64, retries: u32) {
        let p = &self.params.protocol;
        let points = p.scan_points.max(4);
        let dwell = (p.scan_dwell_slots << retries).div_ceil(self.sched.batch_slots).max(1);
        let phases = (0..points)
            .map(|j| {
                self.phi_set - std::f64::consts::PI
                    + (j as f64 + 0.5) / points as f64 * 2.0 * std::f64::consts::PI
            })
            .collect();
        self.scan = Some(AliceScan {
            start_batch: k + self.sched.delta + 1,
            dwell_batches: dwell,
            phases,
            reports: vec![None; points as usize + 1],
            opportunities: vec![(0, 0); points as usize + 1],
            retries,
        });
        self.counters.scans += 1;
        self.abort_inflight(k);
        self.set_phase(k, SessionPhase::Realigning);
        self.stage(ClassicalMessage::Restart { reason: restart_reason::REALIGN });
    }

    fn abort_inflight(&mut self, k: u64) {
        self.current_block.clear();
        self.pending_detect = None;
        self.pending_kickoffs.clear();
        self.verify_outstanding = None;
        while let Some((id, _)) = self.blocks_inflight.pop_front() {
            self.counters.blocks_aborted += 1;
            self.log.push(SessionEvent::BlockAborted { id, batch: k });
        }
    }

    fn finish_scan(&mut self, k: u64) {
        let Some(scan) = self.scan.take() else { return };
        let p = &self.params.protocol;
        let dark = scan.reports[0].unwrap_or((0, 0));
        let points: Vec<ScanPoint> = (0..scan.phases.len())
            .map(|j| {
                let (clicks, slots) = scan.reports[j + 1].unwrap_or((0, 0));
                let (int_opp, ni_opp) = scan.opportunities[j + 1];
                ScanPoint {
                    phase: scan.phases[j],
                    clicks,
                    slots,
                    int_opportunities: int_opp,
                    ni_opportunities: ni_opp,
                }
            })
            .collect();
        let fit = fit_fringe(dark.0, dark.1, &points, 50);
        match fit {
            Ok(f) if f.visibility >= p.vis_threshold_start => {
                self.log.push(SessionEvent::ScanResult {
                    batch: k,
                    visibility: f.visibility,
                    phase: f.phi0,
                    accepted: true,
                });
                self.phi_set = f.phi0;
                self.security_unverified = false;
                self.resume(k);
            }
            outcome => {
                let seen = outcome.as_ref().map(|f| f.visibility).unwrap_or(f64::NAN);
                self.log.push(SessionEvent::ScanResult {
                    batch: k,
                    visibility: seen,
                    phase: self.phi_set,
                    accepted: false,
                });
                if scan.retries + 1 < p.scan_max_retries {
                    // Longer dwell, another pass.
                    self.start_scan(k, scan.retries + 1);
                } else if p.allow_unverified_start {
                    if let Ok(f) = outcome {
                        self.phi_set = f.phi0;
                    }
                    self.security_unverified = true;
                    self.resume(k);
                } else {
                    self.stage(ClassicalMessage::Restart { reason: restart_reason::HALT });
                    self.halt(k, "wavelength scan failed");
                }
            }
        }
    }

    fn resume(&mut self, k: u64) {
        self.stage(ClassicalMessage::Restart { reason: restart_reason::RESUME });
        self.vis_history.clear();
        // The peer starts collecting when the resume arrives.
        self.vis_valid_from_batch = k + self.sched.delta;
        self.set_phase(k, SessionPhase::Exchanging);
    }

    // --- frame handling ---------------------------------------------------------

    fn handle_frame(&mut self, k: u64, sent: u64, bytes: &[u8]) -> Result<(), SessionError> {
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
            ClassicalMessage::SyncPattern { role: 1, result, .. } => {
                self.handle_align_result(k, result);
            }
            ClassicalMessage::SyncPattern { .. } => {}
            ClassicalMessage::DetectAnnounce { indices } => {
                self.pending_detect = Some(indices);
            }
            ClassicalMessage::DmAnnounce { indices } => {
                let detect = self.pending_detect.take().unwrap_or_default();
                self.process_window(k, sent, detect, indices);
            }
            ClassicalMessage::EcParity { pass: 0, block, parities } => {
                self.handle_sample_response(k, block, &parities.to_bits());
            }
            ClassicalMessage::EcParity { pass: _, block, parities } => {
                self.handle_cascade_reply(k, block, &parities.to_bits());
            }
            ClassicalMessage::AuthTag { block, hash, .. } => {
                self.handle_verify_reply(k, block, hash);
            }
            ClassicalMessage::VisReport(VisReport::ScanCounts { point, clicks, opportunities }) => {
                self.handle_scan_report(k, point, clicks, opportunities);
            }
            ClassicalMessage::VisReport(_) => {}
            ClassicalMessage::Restart { reason } => match reason {
                restart_reason::HALT => self.halt(k, "peer halt"),
                restart_reason::DESYNC => self.halt(k, "peer desync"),
                _ => {}
            },
            ClassicalMessage::DecoyRemove { .. }
            | ClassicalMessage::EcShuffle { .. }
            | ClassicalMessage::PaSeed { .. } => {
                self.desync(k, "message from wrong direction");
            }
        }
        Ok(())
    }

    fn handle_align_result(&mut self, k: u64, result: u64) {
        if result != u64::MAX {
            self.log.push(SessionEvent::AlignmentFound { batch: k, offset: result });
            let steps = (1.0 / self.params.protocol.tune_step).round() as u64 + 1;
            let dw = self
                .params
                .protocol
                .tune_dwell_slots
                .div_ceil(self.sched.batch_slots)
                .max(1);
            self.window_end_batch = (k + 1) + steps * dw;
            self.set_phase(k, SessionPhase::InitWindow);
        } else {
            self.align_retries += 1;
            if self.align_retries >= 3 {
                self.stage(ClassicalMessage::Restart { reason: restart_reason::HALT });
                self.halt(k, "alignment failed");
            } else {
                self.begin_alignment(k + 1);
            }
        }
    }

    fn handle_scan_report(&mut self, k: u64, point: u32, clicks: u64, slots: u64) {
        let all_in = {
            let Some(scan) = self.scan.as_mut() else { return };
            if (point as usize) < scan.reports.len() {
                scan.reports[point as usize] = Some((clicks, slots));
            }
            scan.reports.iter().all(Option::is_some)
        };
        if all_in {
            self.finish_scan(k);
        }
    }

    // --- the announce window ---------------------------------------------------

    fn frame_symbol(&self, frame: u64) -> Option<Symbol> {
        if frame < self.ring_base_frame {
            return None;
        }
        self.ring
            .get((frame - self.ring_base_frame) as usize)
            .map(|&s| Symbol::from_u8(s))
    }

    fn slot_full(&self, slot: i128) -> bool {
        if slot < 0 {
            return false;
        }
        match self.frame_symbol(slot as u64 / 2) {
            Some(sym) => crate::emitter::EmitterConfig::slot_is_full(sym, slot as u64 & 1),
            None => false,
        }
    }

    fn process_window(&mut self, k: u64, sent: u64, detect: Vec<u64>, dm: Vec<u64>) {
        if self.phase != SessionPhase::Exchanging {
            return;
        }
        let wend = (sent + 1) * self.sched.batch_slots - 1;
        if wend as i128 <= self.last_wend || self.gen_end_slot <= wend {
            self.desync(k, "window end out of order");
            return;
        }
        for &d in &detect {
            if d as i128 <= self.last_detect_label || d > wend {
                self.desync(k, "detect announce out of range");
                return;
            }
            self.last_detect_label = d as i128;
        }
        for &d in &dm {
            if d as i128 <= self.last_dm_label || d > wend {
                self.desync(k, "dm announce out of range");
                return;
            }
            self.last_dm_label = d as i128;
        }

        // Monitor-position class counts were folded in at generation time;
        // the window is a whole number of batches.
        let mut vis = VisWindow::default();
        while let Some(&(batch, int, ni, dark)) = self.batch_classes.front() {
            if batch > sent {
                break;
            }
            self.batch_classes.pop_front();
            if batch >= self.vis_valid_from_batch {
                vis.int_opportunities += u64::from(int);
                vis.ni_opportunities += u64::from(ni);
                vis.dark_opportunities += u64::from(dark);
            }
        }
        for &d in &dm {
            let cur = self.slot_full(d as i128);
            let prev = self.slot_full(d as i128 - 1);
            match (prev, cur) {
                (true, true) => vis.int_clicks += 1,
                (false, false) => vis.dark_clicks += 1,
                _ => vis.ni_clicks += 1,
            }
        }
        self.counters.dm_announced += dm.len() as u64;

        // Pre-sift: map announced detections onto frames, drop decoys, keep
        // data bits, and sacrifice the sampling subset.
        let mut removes = Vec::new();
        let mut sample_bits = Vec::new();
        let sampling_at_start = self.blocks_frozen == 0;
        for &label in &detect {
            self.counters.announced += 1;
            let Some(sym) = self.frame_symbol(label / 2) else {
                self.desync(k, "announced frame already pruned");
                return;
            };
            match sym.bit() {
                None => {
                    removes.push(label);
                    self.counters.decoys_removed += 1;
                }
                Some(bit) => {
                    self.counters.sifted_kept += 1;
                    let sampling = self.blocks_frozen == 0;
                    if sampling
                        && self.kept_counter % self.params.protocol.sample_inverse as u64 == 0
                    {
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
            }
        }
        self.stage(ClassicalMessage::DecoyRemove { window_end_slot: wend, remove: removes });
        for (id, seeds, q_e5, pass, parities) in std::mem::take(&mut self.pending_kickoffs) {
            for (i, &seed) in seeds.iter().enumerate() {
                self.stage_tagged(ClassicalMessage::EcShuffle {
                    pass: i as u8 + 2,
                    block: id,
                    seed,
                    q_e5,
                });
            }
            self.counters.leak_parity_audit += parities.len() as u64;
            self.stage_tagged(ClassicalMessage::EcParity {
                pass,
                block: id,
                parities: BitsetPayload::from_bits(&parities),
            });
        }
        if sampling_at_start {
            self.sample_pending.push_back((wend, sample_bits));
        }

        // Watchdog over the trailing windows.
        self.vis_history.push_back(vis);
        while self.vis_history.len() > self.params.protocol.vis_window_rounds as usize {
            self.vis_history.pop_front();
        }
        let mut agg = VisWindow::default();
        for w in &self.vis_history {
            agg.add(w);
        }
        let est = estimate_visibility(
            &agg,
            1.0 / self.params.emitter.extinction_ratio,
            self.params.protocol.watchdog_min_opportunities,
            self.params.protocol.watchdog_min_ni_clicks,
        );
        self.latest_vis = Some(est);
        self.stage_tagged(ClassicalMessage::VisReport(VisReport::Exchange {
            visibility: est.visibility,
            ci_low: est.ci_low,
            ci_high: est.ci_high,
            interfering_clicks: est.int_clicks,
            noninterfering_clicks: est.ni_clicks,
            interfering_opportunities: est.int_opportunities,
            sufficient: est.sufficient,
        }));
        self.stage_tagged(ClassicalMessage::VisReport(VisReport::SampleQber {
            compared: self.counters.sample_compared,
            mismatches: self.counters.sample_mismatches,
        }));
        // Act only when the strict confidence bound excludes the threshold:
        // statistical dips at starved monitor rates must not flap the
        // session into a rescan.
        if est.sufficient && est.ci_high_strict < self.params.protocol.vis_threshold_run {
            self.counters.watchdog_trips += 1;
            self.log.push(SessionEvent::WatchdogTrip { batch: k, visibility: est.visibility });
            self.start_scan(k, 0);
            self.prune_ring(wend);
            self.last_wend = wend as i128;
            return;
        }

        self.controller_round(&vis);
        self.prune_ring(wend);
        self.last_wend = wend as i128;
    }

    fn prune_ring(&mut self, wend: u64) {
        let keep_from = wend / 2;
        if keep_from > self.ring_base_frame {
            let drop = ((keep_from - self.ring_base_frame) as usize).min(self.ring.len());
            self.ring.drain(..drop);
            self.ring_base_frame += drop as u64;
        }
    }

    /// Wavelength-tracking controller: dithers the setpoint between announce
    /// rounds and steps toward the side with fewer interfering clicks.
    fn controller_round(&mut self, vis: &VisWindow) {
        let p = &self.params.protocol;
        if p.controller_dither_rad == 0.0 || p.controller_period_rounds == 0 {
            return;
        }
        if self.ctl_sign > 0.0 {
            self.ctl_plus.0 += vis.int_clicks;
            self.ctl_plus.1 += vis.int_opportunities;
        } else {
            self.ctl_minus.0 += vis.int_clicks;
            self.ctl_minus.1 += vis.int_opportunities;
        }
        self.ctl_sign = -self.ctl_sign;
        self.ctl_rounds += 1;
        if self.ctl_rounds >= p.controller_period_rounds {
            let enough = self.ctl_plus.0 + self.ctl_minus.0 >= 100
                && self.ctl_plus.1 > 0
                && self.ctl_minus.1 > 0;
            if enough {
                let rp = self.ctl_plus.0 as f64 / self.ctl_plus.1 as f64;
                let rm = self.ctl_minus.0 as f64 / self.ctl_minus.1 as f64;
                let step = p.controller_gain * p.controller_dither_rad;
                self.phi_set -= step * (rp - rm).signum();
            }
            self.ctl_rounds = 0;
            self.ctl_plus = (0, 0);
            self.ctl_minus = (0, 0);
        }
    }

    // --- distillation (reference side) -----------------------------------------

    fn current_q_estimate(&self) -> f64 {
        let q = if let Some(q) = self.q_from_blocks {
            q
        } else if self.counters.sample_compared >= 20 {
            self.counters.sample_mismatches as f64 / self.counters.sample_compared as f64
        } else {
            self.params.protocol.q_fallback
        };
        q.clamp(1e-4, 0.15)
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
        let q = self.current_q_estimate();
        let q_e5 = (q * 1e5).round() as u32;
        let seeds = [
            self.rng_shuffle.next_u64(),
            self.rng_shuffle.next_u64(),
            self.rng_shuffle.next_u64(),
        ];
        let side = CascadeSide::reference(bits.clone(), q, &seeds);
        let first = side.round_parities();
        self.pending_kickoffs.push((
            id,
            seeds,
            q_e5,
            side.control.current_pass(),
            first.clone(),
        ));
        let (vis, vis_ok) = self.block_visibility();
        self.blocks_inflight.push_back((
            id,
            AliceBlock {
                bits,
                side,
                state: AliceBlockState::Cascading { last_sent: first },
                first_slot: self.block_first_slot,
                last_slot: self.block_last_slot,
                q_estimate: q,
                visibility: vis,
                vis_sufficient: vis_ok,
                verify_key: 0,
            },
        ));
    }

    /// Visibility attributed to new key material: the live estimate when its
    /// statistics suffice, otherwise the installation value with the block
    /// flagged security-unverified.
    fn block_visibility(&self) -> (f64, bool) {
        match self.latest_vis {
            Some(v) if v.sufficient => (v.visibility, !self.security_unverified),
            _ => (self.params.channel.true_visibility, false),
        }
    }

    fn handle_sample_response(&mut self, k: u64, wend: u64, bob_bits: &[u8]) {
        let Some((expect_wend, mine)) = self.sample_pending.pop_front() else {
            self.desync(k, "unexpected sample response");
            return;
        };
        if expect_wend != wend || mine.len() != bob_bits.len() {
            self.desync(k, "sample response mismatch");
            return;
        }
        self.counters.sample_compared += mine.len() as u64;
        self.counters.sample_mismatches += mine
            .iter()
            .zip(bob_bits)
            .filter(|(a, b)| a != b)
            .count() as u64;
    }

    fn block_entry(&mut self, id: u64) -> Option<&mut AliceBlock> {
        self.blocks_inflight
            .iter_mut()
            .find(|(bid, _)| *bid == id)
            .map(|(_, b)| b)
    }

    fn handle_cascade_reply(&mut self, k: u64, id: u64, bob_parities: &[u8]) {
        enum Outcome {
            Missing,
            WrongState,
            BadLength,
            Done,
            Next { pass: u8, parities: Vec<u8> },
        }
        let outcome = {
            match self.block_entry(id) {
                // Replies for blocks aborted by a watchdog trip still drain.
                None => Outcome::Missing,
                Some(block) => match &block.state {
                    AliceBlockState::Cascading { last_sent }
                        if last_sent.len() != bob_parities.len() =>
                    {
                        Outcome::BadLength
                    }
                    AliceBlockState::Cascading { last_sent } => {
                        let mine = last_sent.clone();
                        block.side.absorb_round(&mine, bob_parities);
                        if block.side.done() {
                            block.state = AliceBlockState::QueuedForVerify;
                            Outcome::Done
                        } else {
                            let next = block.side.round_parities();
                            let pass = block.side.control.current_pass();
                            block.state =
                                AliceBlockState::Cascading { last_sent: next.clone() };
                            Outcome::Next { pass, parities: next }
                        }
                    }
                    _ => Outcome::WrongState,
                },
            }
        };
        match outcome {
            Outcome::Missing => {}
            Outcome::WrongState => self.desync(k, "cascade reply in wrong state"),
            Outcome::BadLength => self.desync(k, "cascade reply length mismatch"),
            Outcome::Done => self.try_start_verify(k),
            Outcome::Next { pass, parities } => {
                self.counters.leak_parity_audit += parities.len() as u64;
                self.stage_tagged(ClassicalMessage::EcParity {
                    pass,
                    block: id,
                    parities: BitsetPayload::from_bits(&parities),
                });
            }
        }
    }

    /// Verification and amplification run one block at a time so the
    /// id-less PA seed always addresses a unique block on the other side.
    fn try_start_verify(&mut self, _k: u64) {
        if self.verify_outstanding.is_some() {
            return;
        }
        let key = self.rng_pa.next_u64() | 1;
        let staged = {
            let Some((id, block)) = self
                .blocks_inflight
                .iter_mut()
                .find(|(_, b)| matches!(b.state, AliceBlockState::QueuedForVerify))
                .map(|(id, b)| (*id, b))
            else {
                return;
            };
            let hash = verify_hash50(key, &block.bits);
            block.verify_key = key;
            block.state = AliceBlockState::AwaitVerifyReply { hash };
            (id, hash)
        };
        self.verify_outstanding = Some(staged.0);
        self.counters.leak_hash_audit += u64::from(VERIFY_HASH_BITS);
        self.stage_tagged(ClassicalMessage::AuthTag { block: staged.0, hash: staged.1, key });
    }

    fn handle_verify_reply(&mut self, k: u64, id: u64, bob_hash: u64) {
        if self.verify_outstanding != Some(id) {
            return;
        }
        self.verify_outstanding = None;
        let (ok, n, leak_ec, bits, visibility, corrections) = {
            let Some(block) = self.block_entry(id) else { return };
            let AliceBlockState::AwaitVerifyReply { hash } = block.state else {
                self.desync(k, "verify reply in wrong state");
                return;
            };
            (
                hash == bob_hash,
                block.bits.len() as u32,
                block.side.control.leak_parity_bits + u64::from(VERIFY_HASH_BITS),
                block.bits.clone(),
                block.visibility,
                block.side.control.corrections.len() as u32,
            )
        };
        self.log.push(SessionEvent::BlockVerified { id, batch: k, ok });
        // A seed staged too late never reaches the peer; drop the block on
        // both sides so the emitted keys stay bit-identical at run end.
        let deliverable = k + self.sched.delta < self.sched.n_batches;
        if ok && !deliverable {
            self.counters.blocks_aborted += 1;
            self.log.push(SessionEvent::BlockAborted { id, batch: k });
            if let Some(pos) = self.blocks_inflight.iter().position(|(bid, _)| *bid == id) {
                self.blocks_inflight.remove(pos);
            }
            self.try_start_verify(k);
            return;
        }
        if ok {
            let i_ae = eve_information(
                self.params.emitter.mu,
                self.params.channel.link.transmission,
                visibility,
            )
            .unwrap_or(1.0);
            let m = compute_output_length(n, leak_ec, i_ae, self.params.protocol.safety_bits);
            let seed_bits: Vec<u8> = (0..(n as usize + m as usize - 1))
                .map(|_| (self.rng_pa.next_u64() & 1) as u8)
                .collect();
            let spec = ToeplitzSpec::new(n as usize, m as usize, seed_bits.clone())
                .expect("seed length computed");
            let out = privacy_amplify(&bits, &spec).expect("dimensions match");
            self.q_from_blocks = Some(f64::from(corrections) / f64::from(n));
            self.counters.blocks_ok += 1;
            self.counters.secret_bits += out.len() as u64;
            self.final_key.extend_from_slice(&out);
            self.log.push(SessionEvent::BlockEmitted { id, batch: k, bits: m });
            self.stage_tagged(ClassicalMessage::PaSeed {
                n,
                m,
                seed_bits: BitsetPayload::from_bits(&seed_bits),
            });
            self.record_block(id, true, m, leak_ec);
        } else {
            self.counters.blocks_rejected += 1;
            self.record_block(id, false, 0, leak_ec);
        }
        self.try_start_verify(k);
    }

    fn record_block(&mut self, id: u64, verified: bool, m: u32, leak_ec: u64) {
        if let Some(pos) = self.blocks_inflight.iter().position(|(bid, _)| *bid == id) {
            let (_, b) = self.blocks_inflight.remove(pos).unwrap();
            self.blocks.push(KeyBlock {
                id,
                n: b.bits.len() as u32,
                q_estimate: b.q_estimate,
                corrections: b.side.control.corrections.len() as u32,
                leak_ec,
                verified,
                m,
                visibility: b.visibility,
                vis_sufficient: b.vis_sufficient,
                first_slot: b.first_slot,
                last_slot: b.last_slot,
            });
        }
    }

    // --- emission ----------------------------------------------------------------

    fn generate(&mut self, k: u64) -> QBatch {
        let nsyms = (self.sched.batch_slots / 2) as usize;
        let start_slot = self.gen_end_slot;
        let mut symbols = vec![0u8; nsyms];
        let mut vacuum = false;
        let mut phase = self.phi_set;

        let mut in_pattern = false;
        if self.phase == SessionPhase::InitAlign {
            let pat_batches =
                (self.pattern_symbols.len() as u64 * 2).div_ceil(self.sched.batch_slots);
            if k >= self.pattern_start_batch && k < self.pattern_start_batch + pat_batches {
                in_pattern = true;
                let base = ((k - self.pattern_start_batch) * self.sched.batch_slots / 2) as usize;
                for (i, slot) in symbols.iter_mut().enumerate() {
                    *slot = self
                        .pattern_symbols
                        .get(base + i)
                        .copied()
                        .map_or(Symbol::Bit0 as u8, |s| s as u8);
                }
            }
        }
        if !in_pattern {
            self.stream.fill(&mut symbols);
        }

        if self.phase == SessionPhase::Realigning {
            if let Some(scan) = self.scan.as_mut() {
                if k >= scan.start_batch {
                    let dwell = ((k - scan.start_batch) / scan.dwell_batches) as usize;
                    if dwell < scan.reports.len() {
                        if dwell == 0 {
                            vacuum = true;
                        } else {
                            phase = scan.phases[dwell - 1];
                        }
                        // Count monitor-position classes for the fringe fit.
                        let mut prev = self.gen_prev_full;
                        let (mut int_opp, mut ni_opp) = scan.opportunities[dwell];
                        for (i, &code) in symbols.iter().enumerate() {
                            let sym = Symbol::from_u8(code);
                            let a = crate::emitter::EmitterConfig::slot_is_full(sym, 0);
                            let b = crate::emitter::EmitterConfig::slot_is_full(sym, 1);
                            let _ = i;
                            match (prev, a) {
                                (true, true) => int_opp += 1,
                                (false, false) => {}
                                _ => ni_opp += 1,
                            }
                            match (a, b) {
                                (true, true) => int_opp += 1,
                                (false, false) => {}
                                _ => ni_opp += 1,
                            }
                            prev = b;
                        }
                        scan.opportunities[dwell] = (int_opp, ni_opp);
                    }
                }
            }
        } else if self.phase == SessionPhase::Exchanging {
            self.exchanging_slots += self.sched.batch_slots;
            if self.params.protocol.controller_dither_rad > 0.0 {
                phase += self.ctl_sign * self.params.protocol.controller_dither_rad;
            }
        }

        // Retain the frame log for pre-sifting and fold the monitor-position
        // class counts while the symbols are hot.
        self.ring.extend(symbols.iter().copied());
        {
            let mut int = 0u32;
            let mut ni = 0u32;
            let mut dark = 0u32;
            let mut prev = self.gen_prev_full;
            for &code in &symbols {
                // (first, second) slot fullness per symbol code.
                let (a, b) = match code {
                    0 => (false, true),
                    1 => (true, false),
                    _ => (true, true),
                };
                int += u32::from(prev & a) + u32::from(a & b);
                dark += u32::from(!prev & !a) + u32::from(!a & !b);
                ni += u32::from(prev ^ a) + u32::from(a ^ b);
                prev = b;
            }
            self.gen_prev_full = prev;
            self.batch_classes.push_back((k, int, ni, dark));
        }
        self.gen_end_slot += self.sched.batch_slots;

        QBatch { start_slot, phase_setpoint: phase, vacuum, symbols }
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
            Err(_) => self.halt(u64::MAX, "authentication pool exhausted"),
        }
    }

    pub fn finish(self) -> EndpointReport {
        let q = if self.counters.sample_compared > 0 {
            Some(self.counters.sample_mismatches as f64 / self.counters.sample_compared as f64)
        } else {
            None
        };
        EndpointReport {
            counters: self.counters,
            log: self.log,
            sifted_stream: self.sifted_stream,
            sample_stream: self.sample_stream,
            blocks: self.blocks,
            final_key: self.final_key,
            last_vis: self.latest_vis,
            qber_estimate: self.q_from_blocks.or(q),
            exchanging_slots: self.exchanging_slots,
            total_slots: self.sched.total_slots(),
            halted: self.halted,
        }
    }
}
