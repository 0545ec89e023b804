//! Entry point: a manager routes flows to stamping units, and each unit
//! hands out flow ids from its own slice of the id space.

use std::collections::HashMap;
use std::ops::Range;

use crate::model::{flow_hash, FlowKey, Nanos, Packet, PacketId, Timing};

/// Width of each unit's flow-id range.
pub const UNIT_ID_SPAN: u64 = 1 << 48;

#[derive(Debug, Clone)]
pub struct StampingUnit {
    pub unit_index: usize,
    pub id_range: Range<u64>,
    flow_table: HashMap<FlowKey, (u64, u64)>,
    /// Next never-issued flow id; survives recovery.
    next_flow_id: u64,
    pub incarnation: u32,
    pub alive: bool,
}

impl StampingUnit {
    fn new(unit_index: usize) -> Self {
        let lo = unit_index as u64 * UNIT_ID_SPAN;
        Self {
            unit_index,
            id_range: lo..lo + UNIT_ID_SPAN,
            flow_table: HashMap::new(),
            next_flow_id: lo,
            incarnation: 0,
            alive: true,
        }
    }

    /// Returns `(flow_id, counter)` for the next packet of `key`.
    fn assign(&mut self, key: FlowKey) -> PacketId {
        let entry = match self.flow_table.get_mut(&key) {
            Some(e) => e,
            None => {
                let id = self.next_flow_id;
                assert!(self.id_range.contains(&id), "unit {} exhausted its flow ids", self.unit_index);
                self.next_flow_id += 1;
                self.flow_table.entry(key).or_insert((id, 1))
            }
        };
        let pid = PacketId::new(entry.0, entry.1);
        entry.1 += 1;
        pid
    }

    pub fn flows(&self) -> usize {
        self.flow_table.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StampOutcome {
    /// The manager itself is down.
    ManagerDown,
    /// The target unit is down.
    UnitDown(usize),
}

#[derive(Debug, Clone)]
pub struct StamperManager {
    pub units: Vec<StampingUnit>,
    pub alive: bool,
}

impl StamperManager {
    pub fn new(unit_count: usize) -> Self {
        assert!(unit_count >= 1, "stamper needs at least one unit");
        Self { units: (0..unit_count).map(StampingUnit::new).collect(), alive: true }
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn route(&self, key: &FlowKey) -> usize {
        flow_hash(key, self.units.len())
    }

    /// Stamps an arriving packet, or reports why it was dropped.
    #[allow(clippy::too_many_arguments)]
    pub fn stamp(
        &mut self,
        key: FlowKey,
        payload_len: u32,
        arrival_time: Nanos,
        work_cost: Nanos,
        global_update_flag: bool,
        seq: u64,
    ) -> Result<(usize, Packet), StampOutcome> {
        if !self.alive {
            return Err(StampOutcome::ManagerDown);
        }
        let idx = self.route(&key);
        let unit = &mut self.units[idx];
        if !unit.alive {
            return Err(StampOutcome::UnitDown(idx));
        }
        let id = unit.assign(key);
        Ok((
            idx,
            Packet {
                id,
                key,
                payload_len,
                stamp_time: arrival_time,
                work_cost,
                global_update_flag,
                seq,
                timing: Timing::default(),
            },
        ))
    }

    /// Current flow id of `key`, if its unit has seen it this incarnation.
    pub fn flow_id_of(&self, key: &FlowKey) -> Option<u64> {
        self.units[self.route(key)].flow_table.get(key).map(|e| e.0)
    }

    pub fn fail_unit(&mut self, unit_index: usize) {
        self.units[unit_index].alive = false;
    }

    /// Brings a unit back with an empty flow table; known flows get fresh ids.
    pub fn recover_unit(&mut self, unit_index: usize) {
        let u = &mut self.units[unit_index];
        u.alive = true;
        u.incarnation += 1;
        u.flow_table.clear();
    }

    pub fn fail_manager(&mut self) {
        self.alive = false;
    }

    pub fn recover_manager(&mut self) {
        self.alive = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeMap, HashSet};

    fn key(n: u32) -> FlowKey {
        FlowKey::new(n, 1, 1000 + n as u16, 80, 17)
    }

    fn stamp(m: &mut StamperManager, k: FlowKey) -> Result<(usize, Packet), StampOutcome> {
        m.stamp(k, 64, 0, 0, false, 0)
    }

    #[test]
    fn first_packet_gets_counter_one() {
        let mut m = StamperManager::new(1);
        let (_, p) = stamp(&mut m, key(1)).unwrap();
        assert_eq!(p.id.counter, 1);
    }

    #[test]
    fn counter_is_previous_plus_one() {
        let mut m = StamperManager::new(3);
        for _ in 0..7 {
            stamp(&mut m, key(5)).unwrap();
        }
        let (_, p) = stamp(&mut m, key(5)).unwrap();
        assert_eq!(p.id.counter, 8);
    }

    #[test]
    fn failed_unit_drops() {
        let mut m = StamperManager::new(4);
        let u = m.route(&key(9));
        m.fail_unit(u);
        assert_eq!(stamp(&mut m, key(9)).unwrap_err(), StampOutcome::UnitDown(u));
    }

    #[test]
    fn failed_manager_drops_everything() {
        let mut m = StamperManager::new(2);
        m.fail_manager();
        assert_eq!(stamp(&mut m, key(1)).unwrap_err(), StampOutcome::ManagerDown);
        m.recover_manager();
        assert!(stamp(&mut m, key(1)).is_ok());
    }

    #[test]
    fn recovered_unit_issues_fresh_flow_id() {
        let mut m = StamperManager::new(2);
        let k = key(3);
        let mut last = None;
        for _ in 0..40 {
            last = Some(stamp(&mut m, k).unwrap().1.id);
        }
        let before = last.unwrap();
        assert_eq!(before.counter, 40);
        let u = m.route(&k);
        m.fail_unit(u);
        m.recover_unit(u);
        let (_, p) = stamp(&mut m, k).unwrap();
        assert_eq!(p.id.counter, 1);
        assert_ne!(p.id.flow_id, before.flow_id);
        assert!(m.units[u].id_range.contains(&p.id.flow_id));
    }

    #[test]
    fn empty_unit_recovery_is_like_fresh() {
        let mut a = StamperManager::new(2);
        let mut b = StamperManager::new(2);
        b.fail_unit(0);
        b.recover_unit(0);
        b.fail_unit(1);
        b.recover_unit(1);
        for n in 0..20 {
            assert_eq!(stamp(&mut a, key(n)).unwrap().1.id, stamp(&mut b, key(n)).unwrap().1.id);
        }
    }

    #[test]
    fn unit_ranges_are_disjoint() {
        let m = StamperManager::new(6);
        for (i, a) in m.units.iter().enumerate() {
            for b in &m.units[i + 1..] {
                assert!(a.id_range.end <= b.id_range.start || b.id_range.end <= a.id_range.start);
            }
        }
    }

    proptest! {
        #[test]
        fn counters_gap_free_and_ids_never_reused(
            ops in prop::collection::vec((0u32..12, 0u8..20), 1..400),
            units in 1usize..5,
        ) {
            let mut m = StamperManager::new(units);
            let mut issued: HashSet<u64> = HashSet::new();
            let mut per_flow: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            let mut owner: BTreeMap<u64, FlowKey> = BTreeMap::new();
            for (k, action) in ops {
                let k = key(k);
                match action {
                    0 => { let u = m.route(&k); m.fail_unit(u); }
                    1 => { let u = m.route(&k); if !m.units[u].alive { m.recover_unit(u); } }
                    _ => {
                        if let Ok((u, p)) = stamp(&mut m, k) {
                            prop_assert!(m.units[u].id_range.contains(&p.id.flow_id));
                            if let Some(prev) = owner.insert(p.id.flow_id, k) {
                                prop_assert_eq!(prev, k);
                            }
                            issued.insert(p.id.flow_id);
                            per_flow.entry(p.id.flow_id).or_default().push(p.id.counter);
                        }
                    }
                }
            }
            for counters in per_flow.values() {
                let expect: Vec<u64> = (1..=counters.len() as u64).collect();
                prop_assert_eq!(counters, &expect);
            }
        }
    }
}
