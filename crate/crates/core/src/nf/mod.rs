//! One NF instance: ordered processing, batch replication to its backup,
//! global updates, promotion and flow hand-off.

pub mod clocks;
pub mod pipeline;

use std::collections::{BTreeMap, BTreeSet};

use crate::config::{Mutation, Phase};
use crate::consensus::{ConsMsg, GlobalReplica, GlobalUpdate};
use crate::control::{CtlMsg, Report};
use crate::fabric::LinkClass;
use crate::model::{Actor, BatchId, EventKind, Nanos, NfId, Packet, MS};
use crate::sim::{Ctx, Ev, Msg, ReleaseRecord};

use clocks::{GlobalMarker, PacketClock, SecondaryStore, StateClock};
use pipeline::{DropSet, LocalState, LocalStateMap, NextExpectedMap, Pipeline, Step};

#[derive(Debug, Clone)]
pub struct NfParams {
    pub batch_size: usize,
    pub input_capacity: Option<usize>,
    pub global_keys: u64,
    pub ctrl_latency_ns: Nanos,
    pub report_occupancy: bool,
    /// Longest a data packet can spend in flight.
    pub data_delay_bound: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Secondary,
    Spare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    WorkDone(u64),
    TxnRetry(u64),
    SubmitRetry(u64),
}

#[derive(Debug, Clone)]
pub struct ResyncPayload {
    pub pc: PacketClock,
    pub sc: StateClock,
    pub held: Vec<Packet>,
    pub marker: GlobalMarker,
}

#[derive(Debug, Clone)]
pub enum TxnPayload {
    PacketClock(PacketClock),
    StateClock(StateClock),
    Resync(Box<ResyncPayload>),
    MigrateIn { flow: u64, state: LocalState, next: u64, floor: u64, drops: BTreeSet<u64> },
}

#[derive(Debug, Clone)]
pub enum PeerMsg {
    Prepare { txn: u64, payload: TxnPayload },
    Prepared { txn: u64 },
    Commit { txn: u64 },
    Committed { txn: u64 },
    InstallFlow { flow: u64, state: LocalState, next: u64, floor: u64, drops: BTreeSet<u64> },
    ForgetFlow { flow: u64 },
    Mirror(Packet),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TxnPhase {
    Preparing,
    Committing,
}

#[derive(Debug)]
struct Txn {
    id: u64,
    peer: NfId,
    payload: TxnPayload,
    phase: TxnPhase,
    attempt: u32,
    timer: u64,
    halting: bool,
}

#[derive(Debug)]
enum Work {
    Idle,
    Processing { packet: Packet, token: u64 },
    Global { packet: Packet, req: u64, attempt: u32, timer: u64 },
}

/// A completed batch whose packet clock has not committed yet.
#[derive(Debug)]
struct Batch {
    pc: PacketClock,
    sc: StateClock,
    packets: Vec<Packet>,
}

/// State as of the last released batch.
#[derive(Debug, Default, Clone)]
struct Released {
    batch: u64,
    next: NextExpectedMap,
    local: LocalStateMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MigPhase {
    Quiesce,
    Transfer,
    AwaitFlip,
}

#[derive(Debug, Clone, Copy)]
struct MigOut {
    flow: u64,
    dst: NfId,
    phase: MigPhase,
}

pub struct Nf {
    pub id: NfId,
    pub role: Role,
    pub alive: bool,
    params: NfParams,
    pub pipe: Pipeline,
    pub local: LocalStateMap,
    pub replica: GlobalReplica,
    pub store: SecondaryStore,
    pub secondary: Option<NfId>,
    primary_of: Option<NfId>,
    batch: u64,
    work: Work,
    txn: Option<Txn>,
    tokens: u64,
    touched: BTreeSet<u64>,
    inflight: Option<Batch>,
    pending_sc: Option<StateClock>,
    /// Input drops not yet covered by a released batch.
    drop_log: DropSet,
    /// Until then, packets may exist only here: a new backup has not
    /// received everything yet.
    exposed_until: Option<Nanos>,
    need_resync: bool,
    released: Released,
    /// Counters below these were released by a previous owner.
    release_floor: NextExpectedMap,
    floor_batch: u64,
    flush: bool,
    /// Packets of flows being migrated out, exempt from input capacity.
    side: BTreeMap<u64, Vec<Packet>>,
    mig: Option<MigOut>,
    /// Flows handed to another NF; arrivals are sent back to the switch.
    gone: BTreeSet<u64>,
    prepared: BTreeMap<(NfId, u64), TxnPayload>,
    committed: BTreeSet<(NfId, u64)>,
}

fn backoff(ctrl: Nanos, attempt: u32) -> Nanos {
    2 * ctrl + (MS << attempt.min(6))
}

impl Nf {
    pub fn new(id: NfId, role: Role, params: NfParams, secondary: Option<NfId>) -> Self {
        Self {
            id,
            role,
            alive: true,
            pipe: Pipeline::new(params.batch_size, params.input_capacity),
            params,
            local: LocalStateMap::new(),
            replica: GlobalReplica::default(),
            store: SecondaryStore::default(),
            secondary,
            primary_of: None,
            batch: 0,
            work: Work::Idle,
            txn: None,
            tokens: 0,
            touched: BTreeSet::new(),
            inflight: None,
            pending_sc: None,
            drop_log: DropSet::new(),
            exposed_until: None,
            need_resync: false,
            released: Released::default(),
            release_floor: NextExpectedMap::default(),
            floor_batch: 0,
            flush: false,
            side: BTreeMap::new(),
            mig: None,
            gone: BTreeSet::new(),
            prepared: BTreeMap::new(),
            committed: BTreeSet::new(),
        }
    }

    fn me(&self) -> Actor {
        Actor::Nf(self.id)
    }

    fn token(&mut self) -> u64 {
        self.tokens += 1;
        self.tokens
    }

    fn peer(&self, ctx: &mut Ctx, to: NfId, body: PeerMsg) {
        ctx.send(self.me(), Actor::Nf(to), LinkClass::Control, Msg::Peer { from: self.id, body });
    }

    fn report(&self, ctx: &mut Ctx, report: Report) {
        ctx.send(self.me(), Actor::Controller, LinkClass::Control, Msg::Report { from: self.id, report });
    }

    pub fn crash(&mut self, ctx: &mut Ctx) {
        if self.role == Role::Primary && self.exposed_until.is_some_and(|t| ctx.now() < t) {
            ctx.notes.push(format!("unrecoverable: {} failed before its new secondary caught up", self.id));
        }
        self.alive = false;
        ctx.emit(self.me(), EventKind::Failure, None, None);
    }

    /// Crashes here if a crash point says so.
    fn crash_point(&mut self, ctx: &mut Ctx, phase: Phase) -> bool {
        if ctx.hit(self.id, phase) {
            self.crash(ctx);
            true
        } else {
            false
        }
    }

    /// Nothing buffered, in flight or owed to a peer.
    pub fn is_settled(&self) -> bool {
        self.busy_reason().is_none()
    }

    pub fn busy_reason(&self) -> Option<String> {
        match self.role {
            Role::Spare => None,
            Role::Secondary => {
                if !self.prepared.is_empty() {
                    Some("prepared transaction not committed".into())
                } else if self.store.held_len() > 0 {
                    Some(format!("{} held packets not covered by a state clock", self.store.held_len()))
                } else {
                    None
                }
            }
            Role::Primary => {
                if self.txn.is_some() || self.inflight.is_some() || self.pending_sc.is_some() || self.need_resync {
                    Some("replication in progress".into())
                } else if !matches!(self.work, Work::Idle) {
                    Some("packet in processing".into())
                } else if !self.pipe.is_quiet() {
                    Some(format!(
                        "buffers not empty (input {}, pending {}, output {})",
                        self.pipe.input.len(),
                        self.pipe.pending.len(),
                        self.pipe.output.len()
                    ))
                } else if !self.side.is_empty() || self.mig.is_some() {
                    Some("migration in progress".into())
                } else if !self.touched.is_empty() {
                    Some("state changes not yet batched".into())
                } else {
                    None
                }
            }
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, msg: Msg) {
        match msg {
            Msg::Data { packet, rule_secondary, forwarded } => self.on_data(ctx, packet, rule_secondary, forwarded),
            Msg::Peer { from, body } => self.on_peer(ctx, from, body),
            Msg::Cons(ConsMsg::Entry { index, update }) => self.replica.deliver(index, update),
            Msg::Cons(ConsMsg::SubmitOk { req, .. }) => {
                if matches!(self.work, Work::Global { req: r, .. } if r == req) {
                    let Work::Global { packet, .. } = std::mem::replace(&mut self.work, Work::Idle) else {
                        unreachable!()
                    };
                    self.finish(ctx, packet);
                }
            }
            Msg::Cons(ConsMsg::Submit { .. }) => {}
            Msg::Ctl(c) => self.on_ctl(ctx, c),
            Msg::Forward(_) | Msg::Report { .. } => {}
        }
    }

    fn on_ctl(&mut self, ctx: &mut Ctx, c: CtlMsg) {
        match c {
            CtlMsg::Ping => self.report(ctx, Report::Pong),
            CtlMsg::AssignSecondary { secondary } => self.assign_secondary(ctx, secondary),
            CtlMsg::MigrateOut { flow, dst } => self.migrate_out(ctx, flow, dst),
            CtlMsg::FlipDone { flow } => self.flip_done(ctx, flow),
            CtlMsg::MigrateAbort { flow } => self.migrate_abort(ctx, flow),
            // handled by the simulator, which needs the consensus service
            CtlMsg::AssignRole { .. } | CtlMsg::Promote { .. } => {}
        }
    }

    fn on_data(&mut self, ctx: &mut Ctx, mut p: Packet, rule_secondary: Option<NfId>, forwarded: bool) {
        p.timing.nf_in = ctx.now();
        ctx.emit(self.me(), EventKind::NfIn, Some(p.id), None);
        if self.role != Role::Primary {
            let id = p.id;
            if self.store.hold(p) {
                ctx.emit(self.me(), EventKind::Buffered, Some(id), None);
            }
            return;
        }
        let flow = p.id.flow_id;
        if self.gone.contains(&flow) {
            self.forward(ctx, p);
            return;
        }
        if let Some(s) = self.secondary.filter(|&s| rule_secondary != Some(s)) {
            // the switch sent the duplicate elsewhere; make sure the backup has it
            ctx.send(
                self.me(),
                Actor::Nf(s),
                LinkClass::Data,
                Msg::Peer { from: self.id, body: PeerMsg::Mirror(p.clone()) },
            );
        }
        if self.pipe.held_flows.contains(&flow) {
            ctx.emit(self.me(), EventKind::Buffered, Some(p.id), None);
            self.side.entry(flow).or_default().push(p);
            return;
        }
        if forwarded {
            self.pipe.input.push_unchecked(p);
        } else if let Err(p) = self.pipe.input.push(p) {
            ctx.stats.input_drops += 1;
            ctx.emit(self.me(), EventKind::Dropped, Some(p.id), None);
            self.pipe.mark_dropped(p.id);
            self.drop_log.entry(flow).or_default().insert(p.id.counter);
        }
        self.advance(ctx);
    }

    fn forward(&mut self, ctx: &mut Ctx, p: Packet) {
        ctx.stats.forwarded += 1;
        ctx.send(self.me(), Actor::Switch, LinkClass::Data, Msg::Forward(p));
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, t: Timer) {
        match t {
            Timer::WorkDone(token) => {
                if matches!(self.work, Work::Processing { token: t, .. } if t == token) {
                    let Work::Processing { packet, .. } = std::mem::replace(&mut self.work, Work::Idle) else {
                        unreachable!()
                    };
                    self.after_work(ctx, packet);
                }
            }
            Timer::TxnRetry(token) => {
                let ctrl = self.params.ctrl_latency_ns;
                let Some(txn) = self.txn.as_mut().filter(|t| t.timer == token) else { return };
                txn.attempt += 1;
                ctx.stats.retries += 1;
                let body = match txn.phase {
                    TxnPhase::Preparing => PeerMsg::Prepare { txn: txn.id, payload: txn.payload.clone() },
                    TxnPhase::Committing => PeerMsg::Commit { txn: txn.id },
                };
                let (peer, attempt) = (txn.peer, txn.attempt);
                let timer = self.token();
                self.txn.as_mut().expect("txn present").timer = timer;
                self.peer(ctx, peer, body);
                ctx.sched.after(backoff(ctrl, attempt), Ev::NfTimer(self.id, Timer::TxnRetry(timer)));
            }
            Timer::SubmitRetry(token) => {
                let ctrl = self.params.ctrl_latency_ns;
                let next = self.token();
                let (me, keys) = (self.id, self.params.global_keys);
                let Work::Global { packet, req, attempt, timer } = &mut self.work else { return };
                if *timer != token {
                    return;
                }
                *attempt += 1;
                *timer = next;
                ctx.stats.retries += 1;
                let update = global_update(me, keys, packet);
                let (req, attempt) = (*req, *attempt);
                ctx.send(self.me(), Actor::Consensus, LinkClass::Control, Msg::Cons(ConsMsg::Submit { req, update }));
                ctx.sched.after(backoff(ctrl, attempt), Ev::NfTimer(self.id, Timer::SubmitRetry(next)));
            }
        }
    }

    fn global_update(&self, p: &Packet) -> GlobalUpdate {
        global_update(self.id, self.params.global_keys, p)
    }

    // ---- primary processing ----

    /// Runs the primary until it has to wait for time or a message.
    pub fn advance(&mut self, ctx: &mut Ctx) {
        loop {
            if !self.alive || self.role != Role::Primary {
                return;
            }
            let changed = self.try_start_txn(ctx);
            if !self.alive {
                return;
            }
            self.pump(ctx);
            if changed {
                continue;
            }
            let idle = matches!(self.work, Work::Idle) && self.txn.is_none() && self.inflight.is_none();
            let wants_flush = (ctx.draining && self.pipe.input.is_empty()) || self.migration_needs_flush();
            if idle && !self.flush && self.unsealed() && wants_flush {
                self.flush = true;
                continue;
            }
            return;
        }
    }

    fn halted(&self) -> bool {
        self.txn.as_ref().is_some_and(|t| t.halting)
    }

    fn pump(&mut self, ctx: &mut Ctx) {
        while self.alive && matches!(self.work, Work::Idle) && !self.halted() {
            match self.pipe.step() {
                Step::Ready(mut p) => {
                    p.timing.start = ctx.now();
                    let token = self.token();
                    ctx.sched.after(p.work_cost, Ev::NfTimer(self.id, Timer::WorkDone(token)));
                    self.work = Work::Processing { packet: p, token };
                    return;
                }
                Step::Diverted(p) => self.side.entry(p.id.flow_id).or_default().push(p),
                Step::StalledOnOrder(_) | Step::Stale(_) => {}
                Step::StalledOnOutput | Step::Idle => return,
            }
        }
    }

    fn after_work(&mut self, ctx: &mut Ctx, p: Packet) {
        let flow = p.id.flow_id;
        self.local.entry(flow).or_default().apply(p.payload_len);
        self.touched.insert(flow);
        let logged = ctx.mutation != Mutation::SkipGlobalMarker && self.replica.marker.covers(p.id);
        if p.global_update_flag && !logged {
            let req = self.token();
            let timer = self.token();
            let update = self.global_update(&p);
            ctx.emit(self.me(), EventKind::GlobalCommitStart, Some(p.id), None);
            ctx.send(self.me(), Actor::Consensus, LinkClass::Control, Msg::Cons(ConsMsg::Submit { req, update }));
            ctx.sched.after(backoff(self.params.ctrl_latency_ns, 0), Ev::NfTimer(self.id, Timer::SubmitRetry(timer)));
            self.work = Work::Global { packet: p, req, attempt: 0, timer };
            self.crash_point(ctx, Phase::GlobalSubmitted);
            return;
        }
        self.finish(ctx, p);
    }

    fn finish(&mut self, ctx: &mut Ctx, mut p: Packet) {
        p.timing.done = ctx.now();
        ctx.emit(self.me(), EventKind::Processed, Some(p.id), None);
        self.pipe.complete(p.id);
        if !self.release_floor.covers(p.id) {
            self.pipe.output.push(p);
        }
        if self.crash_point(ctx, Phase::Processed) {
            return;
        }
        self.advance(ctx);
    }

    fn batch_due(&self) -> bool {
        self.pipe.output.is_full() || (self.flush && self.unsealed())
    }

    /// Output or state changes not yet part of a batch. A silent replay
    /// changes state without filling the output.
    fn unsealed(&self) -> bool {
        !self.pipe.output.is_empty() || !self.touched.is_empty()
    }

    fn migration_needs_flush(&self) -> bool {
        self.mig.is_some_and(|m| {
            m.phase == MigPhase::Quiesce && self.pipe.output.packets().iter().any(|p| p.id.flow_id == m.flow)
        })
    }

    /// Starts the next replication step if none is running; true if anything changed.
    fn try_start_txn(&mut self, ctx: &mut Ctx) -> bool {
        if self.txn.is_some() {
            return false;
        }
        if self.need_resync {
            self.need_resync = false;
            if let Some(s) = self.secondary {
                let payload = TxnPayload::Resync(Box::new(self.resync_payload()));
                self.begin(ctx, s, payload, true);
                return true;
            }
        }
        if let Some(b) = &self.inflight {
            match self.secondary {
                Some(s) => {
                    let payload = TxnPayload::PacketClock(b.pc.clone());
                    self.begin(ctx, s, payload, true);
                }
                None => {
                    let b = self.inflight.take().expect("checked");
                    self.release_batch(ctx, b);
                }
            }
            return true;
        }
        if let Some(sc) = self.pending_sc.take() {
            if let Some(s) = self.secondary {
                self.begin(ctx, s, TxnPayload::StateClock(sc), false);
            }
            return true;
        }
        if matches!(self.work, Work::Idle) && self.batch_due() {
            return self.complete_batch(ctx);
        }
        if let Some(m) = self.mig.filter(|m| m.phase == MigPhase::Quiesce) {
            let busy_on_flow = match &self.work {
                Work::Idle => false,
                Work::Processing { packet, .. } | Work::Global { packet, .. } => packet.id.flow_id == m.flow,
            };
            if !busy_on_flow && !self.migration_needs_flush() {
                let payload = TxnPayload::MigrateIn {
                    flow: m.flow,
                    state: self.local.get(&m.flow).copied().unwrap_or_default(),
                    next: self.pipe.next_expected.get(m.flow),
                    floor: self.release_floor.get(m.flow),
                    drops: self.drop_log.get(&m.flow).cloned().unwrap_or_default(),
                };
                self.mig.as_mut().expect("checked").phase = MigPhase::Transfer;
                self.begin(ctx, m.dst, payload, false);
                return true;
            }
        }
        false
    }

    fn begin(&mut self, ctx: &mut Ctx, peer: NfId, payload: TxnPayload, halting: bool) {
        let id = self.token();
        let timer = self.token();
        self.peer(ctx, peer, PeerMsg::Prepare { txn: id, payload: payload.clone() });
        ctx.sched.after(backoff(self.params.ctrl_latency_ns, 0), Ev::NfTimer(self.id, Timer::TxnRetry(timer)));
        self.txn = Some(Txn { id, peer, payload, phase: TxnPhase::Preparing, attempt: 0, timer, halting });
    }

    /// Seals the output buffer into a batch. False if a crash point fired.
    fn complete_batch(&mut self, ctx: &mut Ctx) -> bool {
        if self.crash_point(ctx, Phase::BatchFull) {
            return false;
        }
        self.flush = false;
        self.batch += 1;
        let batch_id = BatchId(self.batch);
        let next = self.pipe.next_expected.clone();
        let mut released_past = next.clone();
        released_past.merge_max(&self.release_floor);
        let deltas: LocalStateMap = std::mem::take(&mut self.touched)
            .into_iter()
            .map(|f| (f, self.local.get(&f).copied().unwrap_or_default()))
            .collect();
        let packets = self.pipe.output.take_all();
        if self.params.report_occupancy {
            if let Some(cap) = self.params.input_capacity {
                let occ = self.pipe.input.len() as f64 / cap as f64;
                self.report(ctx, Report::Occupancy(occ));
            }
        }
        let mut b = Batch {
            pc: PacketClock { next_expected: released_past, drops: self.drop_log.clone(), batch_id },
            sc: StateClock { next_expected: next, local_deltas: deltas, drops: self.drop_log.clone(), batch_id },
            packets,
        };
        if ctx.mutation == Mutation::ReleaseBeforeCommit && self.secondary.is_some() {
            let early = std::mem::take(&mut b.packets);
            self.emit_release(ctx, early, batch_id);
        }
        self.inflight = Some(b);
        true
    }

    fn emit_release(&mut self, ctx: &mut Ctx, packets: Vec<Packet>, batch: BatchId) {
        let now = ctx.now();
        for p in packets {
            ctx.emit(self.me(), EventKind::Released, Some(p.id), Some(batch));
            ctx.stats.released += 1;
            ctx.releases.push(ReleaseRecord {
                seq: p.seq,
                id: p.id,
                stamp_time: p.stamp_time,
                timing: p.timing,
                released_at: now,
            });
        }
    }

    fn release_batch(&mut self, ctx: &mut Ctx, b: Batch) {
        self.emit_release(ctx, b.packets, b.pc.batch_id);
        self.released.batch = b.pc.batch_id.0;
        self.released.next = b.pc.next_expected;
        for (f, st) in b.sc.local_deltas {
            self.released.local.insert(f, st);
        }
        let next = &self.released.next;
        self.drop_log.retain(|&f, cs| {
            *cs = cs.split_off(&next.get(f));
            !cs.is_empty()
        });
    }

    fn resync_payload(&self) -> ResyncPayload {
        let mut pc_next = self.released.next.clone();
        pc_next.merge_max(&self.release_floor);
        let pc = PacketClock {
            next_expected: pc_next,
            drops: self.drop_log.clone(),
            batch_id: BatchId(self.released.batch.max(self.floor_batch)),
        };
        let sc = StateClock {
            next_expected: self.released.next.clone(),
            local_deltas: self.released.local.clone(),
            drops: self.drop_log.clone(),
            batch_id: BatchId(self.released.batch),
        };
        let covered = &self.released.next;
        let mut held: Vec<Packet> = Vec::new();
        held.extend(self.pipe.input.packets().cloned());
        held.extend(self.pipe.pending.packets().cloned());
        held.extend(self.pipe.output.packets().iter().cloned());
        if let Some(b) = &self.inflight {
            held.extend(b.packets.iter().cloned());
        }
        match &self.work {
            Work::Idle => {}
            Work::Processing { packet, .. } | Work::Global { packet, .. } => held.push(packet.clone()),
        }
        held.extend(self.side.values().flatten().cloned());
        held.retain(|p| !covered.covers(p.id));
        held.sort_by_key(|p| (p.id.flow_id, p.id.counter));
        held.dedup_by_key(|p| p.id);
        ResyncPayload { pc, sc, held, marker: self.replica.marker.clone() }
    }

    fn on_peer(&mut self, ctx: &mut Ctx, from: NfId, body: PeerMsg) {
        match body {
            PeerMsg::Prepare { txn, payload } => {
                if !self.committed.contains(&(from, txn)) {
                    self.prepared.insert((from, txn), payload);
                }
                self.peer(ctx, from, PeerMsg::Prepared { txn });
            }
            PeerMsg::Commit { txn } => {
                if let Some(payload) = self.prepared.remove(&(from, txn)) {
                    self.apply(ctx, payload);
                    self.committed.insert((from, txn));
                }
                if self.committed.contains(&(from, txn)) {
                    self.peer(ctx, from, PeerMsg::Committed { txn });
                }
            }
            PeerMsg::Prepared { txn } => self.on_prepared(ctx, from, txn),
            PeerMsg::Committed { txn } => self.on_committed(ctx, from, txn),
            PeerMsg::InstallFlow { flow, state, next, floor, drops } => {
                self.store.install_flow(flow, state, next, floor, drops)
            }
            PeerMsg::ForgetFlow { flow } => {
                self.store.forget_flow(flow);
                self.store.mirror.remove(&flow);
            }
            PeerMsg::Mirror(mut p) => {
                if self.role != Role::Primary {
                    p.timing.nf_in = ctx.now();
                    let id = p.id;
                    if self.store.hold(p) {
                        ctx.emit(self.me(), EventKind::Buffered, Some(id), None);
                    }
                }
            }
        }
    }

    /// Participant side of a commit.
    fn apply(&mut self, ctx: &mut Ctx, payload: TxnPayload) {
        match payload {
            TxnPayload::PacketClock(pc) => {
                let b = pc.batch_id;
                self.store.commit_packet_clock(pc);
                ctx.stats.packet_clock_commits += 1;
                ctx.emit(self.me(), EventKind::PacketClockCommit, None, Some(b));
            }
            TxnPayload::StateClock(sc) => {
                let b = sc.batch_id;
                self.store.commit_state_clock(sc);
                ctx.stats.state_clock_commits += 1;
                ctx.emit(self.me(), EventKind::StateClockCommit, None, Some(b));
            }
            TxnPayload::Resync(r) => {
                let r = *r;
                let (pb, sb) = (r.pc.batch_id, r.sc.batch_id);
                self.store.install_baseline(r.pc, r.sc);
                for p in r.held {
                    self.store.hold(p);
                }
                self.replica.marker.merge(&r.marker);
                ctx.emit(self.me(), EventKind::StateClockCommit, None, Some(sb));
                ctx.emit(self.me(), EventKind::PacketClockCommit, None, Some(pb));
            }
            TxnPayload::MigrateIn { flow, state, next, floor, drops } => {
                self.local.insert(flow, state);
                self.released.local.insert(flow, state);
                let mut one = NextExpectedMap::default();
                one.set(flow, next);
                self.pipe.next_expected.merge_max(&one);
                self.released.next.merge_max(&one);
                self.gone.remove(&flow);
                self.pipe.install_drops(flow, &drops);
                // the source may still have owed a silent replay
                let mut f = NextExpectedMap::default();
                f.set(flow, floor);
                self.release_floor.merge_max(&f);
                if !drops.is_empty() {
                    self.drop_log.entry(flow).or_default().extend(drops.iter().copied());
                }
                if let Some(s) = self.secondary {
                    self.peer(ctx, s, PeerMsg::InstallFlow { flow, state, next, floor, drops });
                }
                self.pipe.wake(flow);
                self.advance(ctx);
            }
        }
    }

    fn on_prepared(&mut self, ctx: &mut Ctx, from: NfId, id: u64) {
        let Some(txn) = self.txn.as_ref().filter(|t| t.id == id && t.peer == from && t.phase == TxnPhase::Preparing)
        else {
            return;
        };
        let phase = match txn.payload {
            TxnPayload::PacketClock(_) => Some(Phase::PcPrepared),
            TxnPayload::StateClock(_) => Some(Phase::ScPrepared),
            _ => None,
        };
        if phase.is_some_and(|ph| self.crash_point(ctx, ph)) {
            return;
        }
        if phase == Some(Phase::PcPrepared) {
            // commit decided: the batch may leave now
            let b = self.inflight.take().expect("packet clock has a batch");
            self.pending_sc = Some(b.sc.clone());
            self.release_batch(ctx, b);
        }
        let timer = self.token();
        let txn = self.txn.as_mut().expect("checked");
        txn.phase = TxnPhase::Committing;
        txn.attempt = 0;
        txn.timer = timer;
        self.peer(ctx, from, PeerMsg::Commit { txn: id });
        ctx.sched.after(backoff(self.params.ctrl_latency_ns, 0), Ev::NfTimer(self.id, Timer::TxnRetry(timer)));
    }

    fn on_committed(&mut self, ctx: &mut Ctx, from: NfId, id: u64) {
        if !self.txn.as_ref().is_some_and(|t| t.id == id && t.peer == from && t.phase == TxnPhase::Committing) {
            return;
        }
        let txn = self.txn.take().expect("checked");
        match txn.payload {
            TxnPayload::PacketClock(_) => {
                if self.crash_point(ctx, Phase::PcCommitted) {
                    return;
                }
            }
            TxnPayload::MigrateIn { flow, .. } => {
                if let Some(m) = self.mig.as_mut().filter(|m| m.flow == flow) {
                    m.phase = MigPhase::AwaitFlip;
                    self.report(ctx, Report::MigrateCommitted { flow });
                }
            }
            TxnPayload::Resync(_) => {
                if self.exposed_until.is_some() {
                    self.exposed_until = Some(ctx.now() + self.params.data_delay_bound);
                }
            }
            TxnPayload::StateClock(_) => {}
        }
        self.advance(ctx);
    }

    fn assign_secondary(&mut self, ctx: &mut Ctx, secondary: Option<NfId>) {
        if self.role != Role::Primary {
            return;
        }
        let old = self.secondary;
        self.secondary = secondary;
        if secondary.is_some() && secondary != old {
            self.exposed_until = Some(Nanos::MAX);
        }
        if let Some(t) = self.txn.as_ref().filter(|t| Some(t.peer) == old) {
            if matches!(t.payload, TxnPayload::MigrateIn { .. }) {
                // peer is the migration target, not the backup
            } else {
                self.txn = None;
            }
        }
        // the resync baseline covers any state clock still owed to the old backup
        self.pending_sc = None;
        self.need_resync = secondary.is_some();
        self.advance(ctx);
    }

    // ---- failover ----

    pub fn become_secondary(&mut self, _ctx: &mut Ctx, primary: NfId) {
        if self.role == Role::Spare {
            self.role = Role::Secondary;
            self.store.synced = false;
        }
        self.primary_of = Some(primary);
    }

    pub fn promote(&mut self, ctx: &mut Ctx, new_secondary: Option<NfId>) {
        if self.role != Role::Secondary {
            return;
        }
        if let Err(e) = self.store.check_lag() {
            ctx.notes.push(format!("{}: {e}", self.id));
        }
        if !self.store.synced {
            ctx.notes.push(format!("unrecoverable: {} promoted before its baseline arrived", self.id));
        }
        let (i, j) = self.store.clocks();
        self.role = Role::Primary;
        self.primary_of = None;
        self.secondary = new_secondary;
        self.prepared.clear();
        self.local = self.store.mirror.clone();
        self.pipe.next_expected = self.store.state_next.clone();
        self.drop_log = std::mem::take(&mut self.store.drops);
        for (&f, cs) in &self.drop_log {
            self.pipe.install_drops(f, cs);
        }
        self.release_floor = self.store.packet_next.clone();
        self.floor_batch = i;
        self.batch = j;
        self.released = Released { batch: j, next: self.store.state_next.clone(), local: self.store.mirror.clone() };
        let mut held = self.store.take_held();
        held.sort_by_key(|p| (p.seq, p.id));
        for p in held {
            if !self.pipe.next_expected.covers(p.id) {
                self.pipe.input.push_unchecked(p);
            }
        }
        self.gone = std::mem::take(&mut self.store.foreign);
        for p in self.store.take_stragglers() {
            self.forward(ctx, p);
        }
        self.need_resync = new_secondary.is_some();
        if self.need_resync {
            self.exposed_until = Some(Nanos::MAX);
        }
        ctx.emit(self.me(), EventKind::Promotion, None, Some(BatchId(i)));
        self.advance(ctx);
    }

    // ---- migration, source side ----

    fn migrate_out(&mut self, ctx: &mut Ctx, flow: u64, dst: NfId) {
        if self.role != Role::Primary || self.mig.is_some() {
            return;
        }
        let held = self.pipe.hold_flow(flow);
        self.side.entry(flow).or_default().extend(held);
        self.mig = Some(MigOut { flow, dst, phase: MigPhase::Quiesce });
        ctx.emit(self.me(), EventKind::MigrationStart, None, None);
        self.advance(ctx);
    }

    fn flip_done(&mut self, ctx: &mut Ctx, flow: u64) {
        if !self.mig.is_some_and(|m| m.flow == flow && m.phase == MigPhase::AwaitFlip) {
            return;
        }
        self.mig = None;
        self.gone.insert(flow);
        self.pipe.held_flows.remove(&flow);
        let mut pkts = self.side.remove(&flow).unwrap_or_default();
        pkts.sort_by_key(|p| p.id.counter);
        for p in pkts {
            self.forward(ctx, p);
        }
        self.local.remove(&flow);
        self.released.local.remove(&flow);
        self.touched.remove(&flow);
        if let Some(s) = self.secondary {
            self.peer(ctx, s, PeerMsg::ForgetFlow { flow });
        }
        ctx.emit(self.me(), EventKind::MigrationDone, None, None);
        self.advance(ctx);
    }

    fn migrate_abort(&mut self, ctx: &mut Ctx, flow: u64) {
        if !self.mig.is_some_and(|m| m.flow == flow) {
            return;
        }
        if self.txn.as_ref().is_some_and(|t| matches!(t.payload, TxnPayload::MigrateIn { flow: f, .. } if f == flow)) {
            self.txn = None;
        }
        self.mig = None;
        let mut pkts = self.side.remove(&flow).unwrap_or_default();
        pkts.sort_by_key(|p| std::cmp::Reverse(p.id.counter));
        for p in pkts {
            self.pipe.input.push_front_unchecked(p);
        }
        self.pipe.release_flow(flow);
        self.advance(ctx);
    }
}

fn global_update(origin: NfId, keys: u64, p: &Packet) -> GlobalUpdate {
    GlobalUpdate { key: p.id.flow_id % keys, delta: 1, origin_pkt: p.id, origin_nf: origin }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let ctrl = 300_000;
        assert_eq!(backoff(ctrl, 0), 600_000 + MS);
        assert_eq!(backoff(ctrl, 1), 600_000 + 2 * MS);
        assert_eq!(backoff(ctrl, 6), 600_000 + 64 * MS);
        assert_eq!(backoff(ctrl, 40), 600_000 + 64 * MS);
    }
}
