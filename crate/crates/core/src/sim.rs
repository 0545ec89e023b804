//! The event loop that wires stamper, switch, NFs, consensus and controller.

use std::collections::BTreeMap;

use crate::config::{Action, CrashPoint, Directive, ExperimentConfig, Mutation, Phase};
use crate::consensus::{ConsMsg, ConsensusParams, ConsensusService, GlobalUpdate};
use crate::control::{Controller, CtlMsg, Report};
use crate::fabric::{LinkClass, NetParams, RuleTable, Scheduler, SimNet};
use crate::harness::traffic::{self, Arrival};
use crate::model::{Actor, BatchId, EventKind, FlowKey, Nanos, NfId, Packet, PacketId, Timing, TraceEvent, MS};
use crate::nf::pipeline::LocalState;
use crate::nf::{Nf, NfParams, PeerMsg, Role, Timer};
use crate::stamper::{StampOutcome, StamperManager};

pub enum Ev {
    Arrival(usize),
    Deliver(Actor, Msg),
    NfTimer(NfId, Timer),
    ConsensusReady(u64),
    QuorumAck(u64),
    FduTick,
    Directive(usize),
    StamperWindow { unit: Option<usize>, up: bool },
    Drain,
}

impl Ev {
    fn label(&self) -> String {
        match self {
            Ev::Arrival(i) => format!("arrival {i}"),
            Ev::Deliver(dst, _) => format!("delivery to {dst}"),
            Ev::NfTimer(n, t) => format!("{n} timer {t:?}"),
            Ev::ConsensusReady(_) | Ev::QuorumAck(_) => "consensus commit".into(),
            Ev::FduTick => "failure-detector tick".into(),
            Ev::Directive(i) => format!("directive {i}"),
            Ev::StamperWindow { .. } => "stamper window".into(),
            Ev::Drain => "drain".into(),
        }
    }
}

pub enum Msg {
    /// A switch copy. `rule_secondary` is the backup named by the rule used.
    /// `forwarded`: already accepted by another NF, so never dropped.
    Data {
        packet: Packet,
        rule_secondary: Option<NfId>,
        forwarded: bool,
    },
    /// A packet an NF sends back through the switch.
    Forward(Packet),
    Peer {
        from: NfId,
        body: PeerMsg,
    },
    Cons(ConsMsg),
    Ctl(CtlMsg),
    Report {
        from: NfId,
        report: Report,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stats {
    pub stamped: u64,
    pub stamper_drops: u64,
    pub input_drops: u64,
    pub released: u64,
    pub global_commits: u64,
    pub packet_clock_commits: u64,
    pub state_clock_commits: u64,
    pub retries: u64,
    pub forwarded: u64,
    pub failovers: u64,
    pub migrations: u64,
}

/// One released packet, for the latency and throughput metrics.
#[derive(Debug, Clone, Copy)]
pub struct ReleaseRecord {
    pub seq: u64,
    pub id: PacketId,
    pub stamp_time: Nanos,
    pub timing: Timing,
    pub released_at: Nanos,
}

/// Shared mutable simulation context handed to every actor callback.
pub struct Ctx {
    pub sched: Scheduler<Ev>,
    pub net: SimNet,
    pub trace: Vec<TraceEvent>,
    pub mutation: Mutation,
    pub stats: Stats,
    pub releases: Vec<ReleaseRecord>,
    /// Traffic has ended; idle primaries flush partial batches.
    pub draining: bool,
    crash_at: BTreeMap<(NfId, Phase), u32>,
    crash_seen: BTreeMap<(NfId, Phase), u32>,
    /// Problems detected while running (placement, unrecoverable faults).
    pub notes: Vec<String>,
}

impl Ctx {
    pub fn new(net: NetParams, mutation: Mutation, crashes: &[CrashPoint]) -> Self {
        Self {
            sched: Scheduler::default(),
            net: SimNet::new(net),
            trace: Vec::new(),
            mutation,
            stats: Stats::default(),
            releases: Vec::new(),
            draining: false,
            crash_at: crashes.iter().map(|c| ((NfId(c.nf), c.phase), c.nth)).collect(),
            crash_seen: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn now(&self) -> Nanos {
        self.sched.now()
    }

    pub fn emit(&mut self, actor: Actor, kind: EventKind, packet: Option<PacketId>, batch: Option<BatchId>) {
        let time = self.now();
        self.trace.push(TraceEvent { time, actor, kind, packet, batch });
    }

    pub fn send(&mut self, src: Actor, dst: Actor, class: LinkClass, msg: Msg) {
        let at = self.net.sample_delivery(self.now(), src, dst, class);
        self.sched.at(at, Ev::Deliver(dst, msg));
    }

    /// Counts a visit to a crash point; true when `nf` should crash here.
    pub fn hit(&mut self, nf: NfId, phase: Phase) -> bool {
        let Some(&nth) = self.crash_at.get(&(nf, phase)) else { return false };
        let seen = self.crash_seen.entry((nf, phase)).or_insert(0);
        *seen += 1;
        *seen == nth
    }
}

/// `(nf, base index, applied entries, global map)` of one live member.
pub type ReplicaView = (NfId, u64, Vec<GlobalUpdate>, BTreeMap<u64, i64>);

/// Everything the checker needs from the end of a run.
#[derive(Debug, Clone, Default)]
pub struct FinalState {
    pub consensus_log: Vec<GlobalUpdate>,
    /// Alive members: `(nf, first index held, applied entries, map)`.
    pub replicas: Vec<ReplicaView>,
    /// Local state at each flow's current owner.
    pub owner_state: BTreeMap<u64, LocalState>,
    /// Flows whose owner is dead or missing.
    pub orphaned: Vec<u64>,
    /// `(secondary, flow)` pairs whose mirror differs from the primary.
    pub mirror_mismatch: Vec<(NfId, u64)>,
    /// Alive NFs still holding work, with a reason.
    pub busy: Vec<(NfId, String)>,
}

pub struct RunOutput {
    pub trace: Vec<TraceEvent>,
    pub releases: Vec<ReleaseRecord>,
    pub stats: Stats,
    pub final_state: FinalState,
    pub notes: Vec<String>,
    pub end_time: Nanos,
    pub arrivals: Vec<Arrival>,
    pub flow_keys: Vec<FlowKey>,
}

pub struct Sim {
    pub ctx: Ctx,
    pub stamper: StamperManager,
    pub rules: RuleTable,
    pub nfs: Vec<Nf>,
    pub consensus: ConsensusService,
    pub ctl: Controller,
    arrivals: Vec<Arrival>,
    directives: Vec<Directive>,
    keys: Vec<FlowKey>,
    work_cost: Nanos,
    /// A run still busy this long after its last input is reported as stuck.
    horizon: Nanos,
}

/// Virtual time allowed after the last input for the system to settle.
const SETTLE_LIMIT: Nanos = 30_000 * MS;

impl Sim {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let arrivals = traffic::generate(cfg);
        Self::with_arrivals(cfg, arrivals)
    }

    pub fn with_arrivals(cfg: &ExperimentConfig, arrivals: Vec<Arrival>) -> Self {
        let net = NetParams {
            base_latency_ns: cfg.net.base_latency_ns,
            jitter_ns: cfg.net.jitter_ns,
            reorder_prob: cfg.net.reorder_prob,
            reorder_penalty_ns: cfg.net.reorder_penalty_ns,
            ctrl_latency_ns: cfg.net.ctrl_latency_ns,
            seed: cfg.net_seed(),
        };
        let mut ctx = Ctx::new(net, cfg.run.mutation, &cfg.crash);
        let params = NfParams {
            batch_size: cfg.nf.batch_size as usize,
            input_capacity: cfg.nf.input_capacity(),
            global_keys: cfg.nf.global_keys,
            ctrl_latency_ns: cfg.net.ctrl_latency_ns,
            report_occupancy: cfg.control.scale_policy,
            data_delay_bound: cfg.net.base_latency_ns + cfg.net.jitter_ns + cfg.net.reorder_penalty_ns,
        };
        let ctl = Controller::new(cfg);
        let mut consensus = ConsensusService::new(ConsensusParams {
            implementation: cfg.consensus.implementation,
            commit_latency_ns: cfg.consensus.commit_latency_ns,
            replicas: cfg.consensus.replicas as usize,
            quorum_size: cfg.consensus.quorum_size as usize,
            outages: cfg.consensus.outage_windows.iter().map(|w| (w[0], w[1])).collect(),
        });
        let mut nfs = Vec::new();
        for n in 0..cfg.total_nfs() {
            let id = NfId(n);
            let mut nf = Nf::new(id, ctl.initial_role(id), params.clone(), ctl.initial_secondary(id));
            if nf.role != Role::Spare {
                consensus.add_founding_member(id);
                nf.replica.member = true;
            }
            if cfg.run.mutation == Mutation::BypassPendingList {
                nf.pipe.bypass_gate = true;
            }
            nfs.push(nf);
        }

        if let Some(a) = arrivals.first() {
            ctx.sched.at(a.time, Ev::Arrival(0));
        }
        let mut directives = cfg.scenario.clone();
        directives.sort_by_key(|d| d.at_ns);
        for (i, d) in directives.iter().enumerate() {
            if d.action != Action::SetRate {
                ctx.sched.at(d.at_ns, Ev::Directive(i));
            }
        }
        for w in &cfg.stamper.manager_failure_windows {
            ctx.sched.at(w[0], Ev::StamperWindow { unit: None, up: false });
            ctx.sched.at(w[1], Ev::StamperWindow { unit: None, up: true });
        }
        for w in &cfg.stamper.unit_failure_windows {
            ctx.sched.at(w[0], Ev::StamperWindow { unit: Some(w[2] as usize), up: false });
            ctx.sched.at(w[1], Ev::StamperWindow { unit: Some(w[2] as usize), up: true });
        }
        let last_input = arrivals.last().map_or(0, |a| a.time).max(directives.last().map_or(0, |d| d.at_ns));
        ctx.sched.at(last_input + cfg.run.drain_delay_ns, Ev::Drain);
        let horizon = last_input + cfg.run.drain_delay_ns + SETTLE_LIMIT;
        ctx.sched.at(cfg.control.ping_interval_ns, Ev::FduTick);

        Self {
            ctx,
            stamper: StamperManager::new(cfg.stamper.unit_count as usize),
            rules: RuleTable::new(),
            nfs,
            consensus,
            ctl,
            arrivals,
            directives,
            keys: traffic::flow_keys(cfg),
            work_cost: cfg.nf.work_cost_ns,
            horizon,
        }
    }

    /// Dispatches the next event; false once the queue is empty or the
    /// run is stuck past its horizon.
    pub fn step(&mut self) -> bool {
        let Some((t, ev)) = self.ctx.sched.pop() else { return false };
        if t > self.horizon {
            self.ctx.notes.push(format!("stuck: events still pending at {t} ns, next is {}", ev.label()));
            return false;
        }
        self.dispatch(ev);
        true
    }

    pub fn run(mut self) -> RunOutput {
        while self.step() {}
        let final_state = self.final_state();
        RunOutput {
            end_time: self.ctx.now(),
            trace: self.ctx.trace,
            releases: self.ctx.releases,
            stats: self.ctx.stats,
            final_state,
            notes: self.ctx.notes,
            arrivals: self.arrivals,
            flow_keys: self.keys,
        }
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival(i) => self.on_arrival(i),
            Ev::Deliver(dst, msg) => self.deliver(dst, msg),
            Ev::NfTimer(n, t) => {
                let nf = &mut self.nfs[n.0 as usize];
                if nf.alive {
                    nf.on_timer(&mut self.ctx, t);
                }
            }
            Ev::ConsensusReady(i) => self.consensus.on_ready(&mut self.ctx, i),
            Ev::QuorumAck(i) => self.consensus.on_quorum_ack(&mut self.ctx, i),
            Ev::FduTick => {
                let busy = self.nfs.iter().any(|n| n.alive && !n.is_settled()) || !self.ctx.draining;
                self.ctl.fdu_tick(&mut self.ctx, &mut self.rules, busy);
            }
            Ev::Directive(i) => self.on_directive(i),
            Ev::StamperWindow { unit, up } => match (unit, up) {
                (None, false) => self.stamper.fail_manager(),
                (None, true) => self.stamper.recover_manager(),
                (Some(u), false) => self.stamper.fail_unit(u),
                (Some(u), true) => self.stamper.recover_unit(u),
            },
            Ev::Drain => {
                self.ctx.draining = true;
                for nf in self.nfs.iter_mut().filter(|n| n.alive) {
                    nf.advance(&mut self.ctx);
                }
            }
        }
    }

    fn on_arrival(&mut self, i: usize) {
        let a = self.arrivals[i];
        if let Some(next) = self.arrivals.get(i + 1) {
            self.ctx.sched.at(next.time, Ev::Arrival(i + 1));
        }
        let key = self.keys[a.flow as usize];
        match self.stamper.stamp(key, a.payload_len, a.time, self.work_cost, a.global, i as u64) {
            Ok((unit, p)) => {
                self.ctx.stats.stamped += 1;
                self.ctx.emit(Actor::Unit(unit as u32), EventKind::Stamped, Some(p.id), None);
                self.switch_forward(p, false);
            }
            Err(why) => {
                self.ctx.stats.stamper_drops += 1;
                let actor = match why {
                    StampOutcome::ManagerDown => Actor::Stamper,
                    StampOutcome::UnitDown(u) => Actor::Unit(u as u32),
                };
                self.ctx.emit(actor, EventKind::Dropped, None, None);
            }
        }
    }

    fn switch_forward(&mut self, p: Packet, forwarded: bool) {
        let flow = p.id.flow_id;
        self.ctx.emit(Actor::Switch, EventKind::SwitchIn, Some(p.id), None);
        let rule = match self.rules.lookup(flow) {
            Some(r) => *r,
            None => {
                if !self.ctl.install_default_rule(&mut self.rules, flow) {
                    let note = format!("unrecoverable: no live primary for flow {flow}");
                    if !self.ctx.notes.contains(&note) {
                        self.ctx.notes.push(note);
                    }
                    return;
                }
                *self.rules.lookup(flow).expect("rule installed")
            }
        };
        let rule_secondary = rule.secondary_nf;
        let targets = [Some(rule.primary_nf), rule.secondary_nf];
        for dst in targets.into_iter().flatten() {
            self.ctx.emit(Actor::Switch, EventKind::DupOut, Some(p.id), None);
            let msg = Msg::Data { packet: p.clone(), rule_secondary, forwarded };
            self.ctx.send(Actor::Switch, Actor::Nf(dst), LinkClass::Data, msg);
        }
    }

    fn deliver(&mut self, dst: Actor, msg: Msg) {
        match dst {
            Actor::Switch => {
                if let Msg::Forward(p) = msg {
                    self.switch_forward(p, true);
                }
            }
            Actor::Consensus => {
                if let Msg::Cons(ConsMsg::Submit { req, update }) = msg {
                    self.consensus.on_submit(&mut self.ctx, update.origin_nf, req, update);
                }
            }
            Actor::Controller => {
                if let Msg::Report { from, report } = msg {
                    self.ctl.on_report(&mut self.ctx, &mut self.rules, from, report);
                }
            }
            Actor::Nf(n) => {
                let nf = &mut self.nfs[n.0 as usize];
                if !nf.alive {
                    return;
                }
                match msg {
                    Msg::Ctl(CtlMsg::AssignRole { primary }) => {
                        let snap = self.consensus.join(n);
                        nf.replica.install_snapshot(&snap);
                        nf.become_secondary(&mut self.ctx, primary);
                    }
                    Msg::Ctl(CtlMsg::Promote { new_secondary }) => {
                        self.consensus.catch_up(&mut nf.replica);
                        nf.promote(&mut self.ctx, new_secondary);
                    }
                    other => nf.on_message(&mut self.ctx, other),
                }
                if !nf.alive {
                    self.consensus.leave(n);
                }
            }
            Actor::Stamper | Actor::Unit(_) => {}
        }
    }

    fn on_directive(&mut self, i: usize) {
        let d = self.directives[i].clone();
        match d.action {
            Action::FailNf => self.crash_nf(NfId(d.nf.expect("validated"))),
            Action::FailNode => {
                let node = d.node.expect("validated");
                for n in self.ctl.nfs_on_node(node) {
                    self.crash_nf(n);
                }
            }
            Action::FailUnit => self.stamper.fail_unit(d.unit.expect("validated") as usize),
            Action::RecoverUnit => self.stamper.recover_unit(d.unit.expect("validated") as usize),
            Action::FailManager => self.stamper.fail_manager(),
            Action::RecoverManager => self.stamper.recover_manager(),
            Action::Migrate => {
                let flows: Vec<u64> =
                    d.flows.iter().filter_map(|&f| self.stamper.flow_id_of(&self.keys[f as usize])).collect();
                for f in flows {
                    let target = d.target.map(NfId).or_else(|| self.ctl.other_primary(&self.rules, f));
                    if let Some(t) = target {
                        self.ctl.request_migrations(&mut self.ctx, &self.rules, &[f], t);
                    }
                }
            }
            Action::SetRate => {}
        }
    }

    fn crash_nf(&mut self, n: NfId) {
        let nf = &mut self.nfs[n.0 as usize];
        if nf.alive {
            nf.crash(&mut self.ctx);
            self.consensus.leave(n);
        }
    }

    fn final_state(&self) -> FinalState {
        let mut fs = FinalState { consensus_log: self.consensus.log().to_vec(), ..FinalState::default() };
        for nf in self.nfs.iter().filter(|n| n.alive && n.replica.member) {
            fs.replicas.push((nf.id, nf.replica.base_index, nf.replica.applied.clone(), nf.replica.map.clone()));
        }
        for rule in self.rules.rules() {
            let owner = &self.nfs[rule.primary_nf.0 as usize];
            if !owner.alive {
                fs.orphaned.push(rule.flow_id);
                continue;
            }
            fs.owner_state.insert(rule.flow_id, owner.local.get(&rule.flow_id).copied().unwrap_or_default());
            if let Some(s) = rule.secondary_nf {
                let sec = &self.nfs[s.0 as usize];
                let primary_state = owner.local.get(&rule.flow_id).copied().unwrap_or_default();
                let mirror = sec.store.mirror.get(&rule.flow_id).copied().unwrap_or_default();
                if sec.alive && mirror != primary_state {
                    fs.mirror_mismatch.push((s, rule.flow_id));
                }
            }
        }
        for nf in self.nfs.iter().filter(|n| n.alive) {
            if let Some(why) = nf.busy_reason() {
                fs.busy.push((nf.id, why));
            }
        }
        fs
    }
}

/// Builds and runs one simulation.
pub fn simulate(cfg: &ExperimentConfig) -> RunOutput {
    Sim::new(cfg).run()
}
