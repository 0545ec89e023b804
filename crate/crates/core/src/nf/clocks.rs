//! Replication records and the secondary's view of its primary.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{BatchId, Packet, PacketId};
use crate::nf::pipeline::{DropSet, LocalState, LocalStateMap, NextExpectedMap};

/// Sent before a batch is released; governs release suppression on failover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketClock {
    pub next_expected: NextExpectedMap,
    /// Input drops the primary skipped; a replay must skip them too.
    pub drops: DropSet,
    pub batch_id: BatchId,
}

/// Sent after a batch is released; carries that batch's per-flow updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateClock {
    pub next_expected: NextExpectedMap,
    /// Post-batch values of every flow the batch touched.
    pub local_deltas: LocalStateMap,
    /// Input drops the primary has not yet released past.
    pub drops: DropSet,
    pub batch_id: BatchId,
}

/// Per flow: counters whose global update the commit log shows. Exact
/// rather than a high-water mark, since an input drop can leave a gap.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlobalMarker(pub BTreeMap<u64, BTreeSet<u64>>);

impl GlobalMarker {
    pub fn observe(&mut self, id: PacketId) {
        self.0.entry(id.flow_id).or_default().insert(id.counter);
    }

    pub fn covers(&self, id: PacketId) -> bool {
        self.0.get(&id.flow_id).is_some_and(|cs| cs.contains(&id.counter))
    }

    pub fn merge(&mut self, other: &GlobalMarker) {
        for (&f, cs) in &other.0 {
            self.0.entry(f).or_default().extend(cs);
        }
    }
}

/// How a promoted secondary resumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryCase {
    /// Packet clock and state clock name the same batch.
    Level,
    /// The packet clock is one batch ahead; that batch is replayed silently.
    PacketClockAhead,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClockLagError {
    #[error("packet clock {i} and state clock {j} violate j <= i <= j+1")]
    Lag { i: u64, j: u64 },
}

#[derive(Debug, Clone)]
pub struct SecondaryStore {
    /// False for a spare until its first baseline arrives.
    pub synced: bool,
    held: BTreeMap<u64, BTreeMap<u64, Packet>>,
    pub last_packet_clock: Option<PacketClock>,
    pub last_state_clock_batch: Option<BatchId>,
    /// Release floor, merged from every packet clock seen.
    pub packet_next: NextExpectedMap,
    /// Processing point, merged from every state clock seen.
    pub state_next: NextExpectedMap,
    pub mirror: LocalStateMap,
    pub drops: DropSet,
    /// Flows migrated away from this secondary's primary.
    pub foreign: BTreeSet<u64>,
    /// Copies of migrated-away flows, forwarded if the primary dies.
    stragglers: BTreeMap<PacketId, Packet>,
}

impl Default for SecondaryStore {
    fn default() -> Self {
        Self {
            synced: true,
            held: BTreeMap::new(),
            last_packet_clock: None,
            last_state_clock_batch: None,
            packet_next: NextExpectedMap::default(),
            state_next: NextExpectedMap::default(),
            mirror: LocalStateMap::new(),
            drops: DropSet::new(),
            foreign: BTreeSet::new(),
            stragglers: BTreeMap::new(),
        }
    }
}

impl SecondaryStore {
    pub fn hold(&mut self, p: Packet) -> bool {
        let flow = p.id.flow_id;
        if self.foreign.contains(&flow) {
            self.stragglers.insert(p.id, p);
            return false;
        }
        if self.state_next.covers(p.id) {
            return false;
        }
        self.held.entry(flow).or_default().entry(p.id.counter).or_insert(p);
        true
    }

    pub fn held_len(&self) -> usize {
        self.held.values().map(BTreeMap::len).sum()
    }

    pub fn held_packets(&self) -> impl Iterator<Item = &Packet> {
        self.held.values().flat_map(|m| m.values())
    }

    pub fn take_held(&mut self) -> Vec<Packet> {
        std::mem::take(&mut self.held).into_values().flat_map(|m| m.into_values()).collect()
    }

    pub fn take_stragglers(&mut self) -> Vec<Packet> {
        std::mem::take(&mut self.stragglers).into_values().collect()
    }

    pub fn clocks(&self) -> (u64, u64) {
        (self.last_packet_clock.as_ref().map_or(0, |c| c.batch_id.0), self.last_state_clock_batch.map_or(0, |b| b.0))
    }

    pub fn check_lag(&self) -> Result<(), ClockLagError> {
        let (i, j) = self.clocks();
        if j <= i && i <= j + 1 {
            Ok(())
        } else {
            Err(ClockLagError::Lag { i, j })
        }
    }

    pub fn commit_packet_clock(&mut self, pc: PacketClock) {
        self.packet_next.merge_max(&pc.next_expected);
        for (f, cs) in &pc.drops {
            self.drops.entry(*f).or_default().extend(cs.iter().copied());
        }
        self.last_packet_clock = Some(pc);
    }

    pub fn commit_state_clock(&mut self, sc: StateClock) {
        for (&flow, &st) in &sc.local_deltas {
            self.mirror.insert(flow, st);
        }
        self.state_next.merge_max(&sc.next_expected);
        for (f, cs) in sc.drops {
            self.drops.entry(f).or_default().extend(cs);
        }
        self.last_state_clock_batch = Some(sc.batch_id);
        self.discard_covered();
    }

    /// Installs a full baseline, as sent on resync.
    pub fn install_baseline(&mut self, pc: PacketClock, sc: StateClock) {
        self.synced = true;
        self.mirror = sc.local_deltas.clone();
        self.drops = sc.drops.clone();
        self.state_next = sc.next_expected.clone();
        self.packet_next = pc.next_expected.clone();
        self.last_state_clock_batch = Some(sc.batch_id);
        self.last_packet_clock = Some(pc);
        self.discard_covered();
    }

    pub fn install_flow(&mut self, flow: u64, state: LocalState, next: u64, floor: u64, drops: BTreeSet<u64>) {
        self.mirror.insert(flow, state);
        self.drops.insert(flow, drops);
        self.foreign.remove(&flow);
        let back: Vec<Packet> = self.stragglers.extract_if(.., |id, _| id.flow_id == flow).map(|(_, p)| p).collect();
        for p in back {
            self.held.entry(flow).or_default().insert(p.id.counter, p);
        }
        let mut one = NextExpectedMap::default();
        one.set(flow, next);
        self.state_next.merge_max(&one);
        one.set(flow, next.max(floor));
        self.packet_next.merge_max(&one);
        self.discard_covered();
    }

    pub fn forget_flow(&mut self, flow: u64) {
        self.foreign.insert(flow);
        for (c, p) in self.held.remove(&flow).unwrap_or_default() {
            self.stragglers.insert(PacketId::new(flow, c), p);
        }
        self.drops.remove(&flow);
    }

    fn discard_covered(&mut self) {
        let next = &self.state_next;
        self.held.retain(|&flow, pkts| {
            let keep = pkts.split_off(&next.get(flow));
            *pkts = keep;
            !pkts.is_empty()
        });
        self.drops.retain(|&flow, cs| {
            *cs = cs.split_off(&next.get(flow));
            !cs.is_empty()
        });
    }

    pub fn recovery_case(&self) -> Result<RecoveryCase, ClockLagError> {
        self.check_lag()?;
        let (i, j) = self.clocks();
        Ok(if i == j { RecoveryCase::Level } else { RecoveryCase::PacketClockAhead })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlowKey, Timing};

    fn pkt(flow: u64, counter: u64) -> Packet {
        Packet {
            id: PacketId::new(flow, counter),
            key: FlowKey::new(0, 0, 0, 0, 17),
            payload_len: 10,
            stamp_time: 0,
            work_cost: 0,
            global_update_flag: false,
            seq: 0,
            timing: Timing::default(),
        }
    }

    fn nexts(pairs: &[(u64, u64)]) -> NextExpectedMap {
        NextExpectedMap(pairs.iter().copied().collect())
    }

    #[test]
    fn state_clock_discards_covered_packets() {
        let mut s = SecondaryStore::default();
        for c in 1..=10 {
            s.hold(pkt(1, c));
        }
        s.commit_packet_clock(PacketClock {
            next_expected: nexts(&[(1, 6)]),
            drops: DropSet::new(),
            batch_id: BatchId(1),
        });
        assert_eq!(s.held_len(), 10);
        s.commit_state_clock(StateClock {
            next_expected: nexts(&[(1, 6)]),
            local_deltas: [(1, LocalState { pkt_count: 5, byte_sum: 50 })].into(),
            drops: DropSet::new(),
            batch_id: BatchId(1),
        });
        assert_eq!(s.held_len(), 5);
        assert_eq!(s.mirror[&1].pkt_count, 5);
        // covered duplicates are not re-held
        assert!(!s.hold(pkt(1, 3)));
    }

    #[test]
    fn lag_cases() {
        let mut s = SecondaryStore::default();
        assert_eq!(s.recovery_case().unwrap(), RecoveryCase::Level);
        s.commit_packet_clock(PacketClock { next_expected: nexts(&[]), drops: DropSet::new(), batch_id: BatchId(1) });
        assert_eq!(s.recovery_case().unwrap(), RecoveryCase::PacketClockAhead);
        s.commit_packet_clock(PacketClock { next_expected: nexts(&[]), drops: DropSet::new(), batch_id: BatchId(2) });
        assert!(s.check_lag().is_err());
    }

    #[test]
    fn marker_keeps_gaps() {
        let mut m = GlobalMarker::default();
        m.observe(PacketId::new(4, 203));
        m.observe(PacketId::new(4, 100));
        assert!(m.covers(PacketId::new(4, 203)));
        assert!(m.covers(PacketId::new(4, 100)));
        assert!(!m.covers(PacketId::new(4, 150)));
        assert!(!m.covers(PacketId::new(4, 204)));
    }

    #[test]
    fn forgotten_flow_is_not_held() {
        let mut s = SecondaryStore::default();
        s.hold(pkt(2, 1));
        s.forget_flow(2);
        assert_eq!(s.held_len(), 0);
        assert!(!s.hold(pkt(2, 2)));
        s.install_flow(2, LocalState::default(), 5, 5, BTreeSet::new());
        assert!(!s.hold(pkt(2, 4)));
        assert!(s.hold(pkt(2, 5)));
    }
}
