//! Total-order commit service for global state.
//!
//! Two interchangeable implementations share one surface: a sequencer that
//! orders submissions on arrival, and a static-leader log that commits an
//! entry once a majority of replicas acknowledged it. The sequencer is the
//! reference the quorum log is checked against.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::fabric::LinkClass;
use crate::model::{Actor, EventKind, Nanos, NfId, PacketId};
use crate::nf::clocks::GlobalMarker;
use crate::sim::{Ctx, Ev, Msg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlobalUpdate {
    pub key: u64,
    pub delta: i64,
    pub origin_pkt: PacketId,
    pub origin_nf: NfId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsensusImpl {
    #[default]
    Sequencer,
    Quorum,
}

#[derive(Debug, Clone)]
pub enum ConsMsg {
    Submit { req: u64, update: GlobalUpdate },
    SubmitOk { req: u64, index: u64 },
    Entry { index: u64, update: GlobalUpdate },
}

/// One member's applied copy of the global state.
#[derive(Debug, Clone, Default)]
pub struct GlobalReplica {
    pub map: BTreeMap<u64, i64>,
    /// Index of the first entry not yet applied.
    pub applied_index: u64,
    /// Index this member joined at; entries below arrived as a snapshot.
    pub base_index: u64,
    /// Applied entries from `base_index` on.
    pub applied: Vec<GlobalUpdate>,
    pub marker: GlobalMarker,
    early: BTreeMap<u64, GlobalUpdate>,
    pub member: bool,
}

impl GlobalReplica {
    /// Queues an entry; applies every entry that is now contiguous.
    pub fn deliver(&mut self, index: u64, update: GlobalUpdate) {
        if index >= self.applied_index {
            self.early.insert(index, update);
        }
        while self.apply_next().is_some() {}
    }

    pub fn apply_next(&mut self) -> Option<GlobalUpdate> {
        let u = self.early.remove(&self.applied_index)?;
        *self.map.entry(u.key).or_insert(0) += u.delta;
        self.marker.observe(u.origin_pkt);
        self.applied.push(u);
        self.applied_index += 1;
        Some(u)
    }

    pub fn install_snapshot(&mut self, snap: &JoinSnapshot) {
        self.map = snap.map.clone();
        self.marker = snap.marker.clone();
        self.applied_index = snap.index;
        self.base_index = snap.index;
        self.applied.clear();
        self.early.retain(|&i, _| i >= snap.index);
        self.member = true;
    }
}

#[derive(Debug, Clone, Default)]
pub struct JoinSnapshot {
    pub map: BTreeMap<u64, i64>,
    pub marker: GlobalMarker,
    pub index: u64,
}

#[derive(Debug, Clone)]
pub struct ConsensusParams {
    pub implementation: ConsensusImpl,
    pub commit_latency_ns: Nanos,
    /// Replica count of the quorum log, leader included.
    pub replicas: usize,
    pub quorum_size: usize,
    /// Intervals during which submissions are ignored.
    pub outages: Vec<(Nanos, Nanos)>,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            implementation: ConsensusImpl::Sequencer,
            commit_latency_ns: 0,
            replicas: 3,
            quorum_size: 2,
            outages: Vec::new(),
        }
    }
}

pub struct ConsensusService {
    pub params: ConsensusParams,
    log: Vec<GlobalUpdate>,
    requester: Vec<(NfId, u64)>,
    committed: u64,
    acks: BTreeMap<u64, usize>,
    ready: BTreeSet<u64>,
    seen: HashMap<(NfId, u64), u64>,
    members: BTreeSet<NfId>,
    /// State materialized from committed entries, served to joiners.
    state: GlobalReplica,
}

impl ConsensusService {
    pub fn new(params: ConsensusParams) -> Self {
        Self {
            params,
            log: Vec::new(),
            requester: Vec::new(),
            committed: 0,
            acks: BTreeMap::new(),
            ready: BTreeSet::new(),
            seen: HashMap::new(),
            members: BTreeSet::new(),
            state: GlobalReplica::default(),
        }
    }

    pub fn committed_len(&self) -> u64 {
        self.committed
    }

    pub fn log(&self) -> &[GlobalUpdate] {
        &self.log[..self.committed as usize]
    }

    pub fn members(&self) -> &BTreeSet<NfId> {
        &self.members
    }

    pub fn add_founding_member(&mut self, nf: NfId) {
        self.members.insert(nf);
    }

    /// Adds a member and hands it the state as of the commit point.
    pub fn join(&mut self, nf: NfId) -> JoinSnapshot {
        self.members.insert(nf);
        JoinSnapshot { map: self.state.map.clone(), marker: self.state.marker.clone(), index: self.committed }
    }

    pub fn leave(&mut self, nf: NfId) {
        self.members.remove(&nf);
    }

    /// Applies every committed entry `replica` has not seen yet.
    pub fn catch_up(&self, replica: &mut GlobalReplica) {
        for i in replica.applied_index..self.committed {
            replica.deliver(i, self.log[i as usize]);
        }
    }

    fn in_outage(&self, now: Nanos) -> bool {
        self.params.outages.iter().any(|&(s, e)| now >= s && now < e)
    }

    pub fn on_submit(&mut self, ctx: &mut Ctx, from: NfId, req: u64, update: GlobalUpdate) {
        if self.in_outage(ctx.now()) {
            return;
        }
        if let Some(&index) = self.seen.get(&(from, req)) {
            if index < self.committed {
                ctx.send(
                    Actor::Consensus,
                    Actor::Nf(from),
                    LinkClass::Control,
                    Msg::Cons(ConsMsg::SubmitOk { req, index }),
                );
            }
            return;
        }
        let index = self.log.len() as u64;
        self.log.push(update);
        self.requester.push((from, req));
        self.seen.insert((from, req), index);
        match self.params.implementation {
            ConsensusImpl::Sequencer => {
                ctx.sched.after(self.params.commit_latency_ns, Ev::ConsensusReady(index));
            }
            ConsensusImpl::Quorum => {
                let rtt = 2 * ctx.net.params.ctrl_latency_ns;
                self.acks.insert(index, 1);
                for _ in 1..self.params.replicas {
                    ctx.sched.after(rtt, Ev::QuorumAck(index));
                }
                self.maybe_quorum(ctx, index);
            }
        }
    }

    pub fn on_quorum_ack(&mut self, ctx: &mut Ctx, index: u64) {
        if let Some(a) = self.acks.get_mut(&index) {
            *a += 1;
        }
        self.maybe_quorum(ctx, index);
    }

    fn maybe_quorum(&mut self, ctx: &mut Ctx, index: u64) {
        if self.acks.get(&index).is_some_and(|&a| a >= self.params.quorum_size) {
            self.acks.remove(&index);
            ctx.sched.after(self.params.commit_latency_ns, Ev::ConsensusReady(index));
        }
    }

    /// Commits ready entries strictly in index order.
    pub fn on_ready(&mut self, ctx: &mut Ctx, index: u64) {
        self.ready.insert(index);
        while self.ready.remove(&self.committed) {
            let i = self.committed;
            let update = self.log[i as usize];
            self.committed += 1;
            self.state.deliver(i, update);
            ctx.stats.global_commits += 1;
            ctx.emit(Actor::Consensus, EventKind::GlobalCommitDone, Some(update.origin_pkt), None);
            for &m in &self.members {
                ctx.send(
                    Actor::Consensus,
                    Actor::Nf(m),
                    LinkClass::Control,
                    Msg::Cons(ConsMsg::Entry { index: i, update }),
                );
            }
            let (from, req) = self.requester[i as usize];
            ctx.send(
                Actor::Consensus,
                Actor::Nf(from),
                LinkClass::Control,
                Msg::Cons(ConsMsg::SubmitOk { req, index: i }),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(key: u64, delta: i64, flow: u64, c: u64, nf: u32) -> GlobalUpdate {
        GlobalUpdate { key, delta, origin_pkt: PacketId::new(flow, c), origin_nf: NfId(nf) }
    }

    #[test]
    fn replicas_applying_the_same_log_agree() {
        let log: Vec<_> = (0..50).map(|i| upd(i % 3, i as i64 - 10, i, 1, (i % 2) as u32)).collect();
        let mut a = GlobalReplica::default();
        let mut b = GlobalReplica::default();
        for (i, u) in log.iter().enumerate() {
            a.deliver(i as u64, *u);
        }
        // b receives entries in reverse; it still applies in index order
        for (i, u) in log.iter().enumerate().rev() {
            b.deliver(i as u64, *u);
        }
        assert_eq!(a.map, b.map);
        assert_eq!(a.applied, b.applied);
    }

    #[test]
    fn lagging_member_catches_up() {
        let mut a = GlobalReplica::default();
        let mut b = GlobalReplica::default();
        for i in 0..10u64 {
            a.deliver(i, upd(0, 1, 1, i + 1, 0));
        }
        for i in 0..4u64 {
            b.deliver(i, upd(0, 1, 1, i + 1, 0));
        }
        assert_eq!(b.applied_index, 4);
        for i in 4..10u64 {
            b.deliver(i, upd(0, 1, 1, i + 1, 0));
        }
        assert_eq!(a.map, b.map);
    }

    #[test]
    fn applying_updates_marker() {
        let mut r = GlobalReplica::default();
        r.deliver(0, upd(0, 1, 9, 203, 1));
        assert!(r.marker.covers(PacketId::new(9, 203)));
        assert_eq!(r.marker.0[&9].last(), Some(&203));
    }

    #[test]
    fn joiner_matches_replay_from_zero() {
        let log: Vec<_> = (0..100).map(|i| upd(i % 7, (i * 3) as i64, i, 1, 0)).collect();
        let mut founding = GlobalReplica::default();
        for (i, u) in log.iter().enumerate() {
            founding.deliver(i as u64, *u);
        }
        // snapshot at 60, then the suffix
        let mut prefix = GlobalReplica::default();
        for (i, u) in log.iter().take(60).enumerate() {
            prefix.deliver(i as u64, *u);
        }
        let snap = JoinSnapshot { map: prefix.map.clone(), marker: prefix.marker.clone(), index: 60 };
        let mut joiner = GlobalReplica::default();
        joiner.install_snapshot(&snap);
        for (i, u) in log.iter().enumerate().skip(60) {
            joiner.deliver(i as u64, *u);
        }
        assert_eq!(joiner.map, founding.map);
        assert_eq!(joiner.applied_index, 100);
    }

    #[test]
    fn join_into_empty_cluster_is_empty() {
        let mut s = ConsensusService::new(ConsensusParams::default());
        let snap = s.join(NfId(4));
        assert!(snap.map.is_empty());
        assert_eq!(snap.index, 0);
    }
}
