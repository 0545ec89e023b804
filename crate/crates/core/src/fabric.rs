//! Switch rule table, network latency model and the discrete-event queue.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Actor, Nanos, NfId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowRule {
    pub flow_id: u64,
    pub primary_nf: NfId,
    /// `None` only while a promoted primary runs without a backup.
    pub secondary_nf: Option<NfId>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuleError {
    #[error("flow {0}: primary and secondary must differ")]
    SameTargets(u64),
}

#[derive(Debug, Clone, Default)]
pub struct RuleTable {
    rules: BTreeMap<u64, FlowRule>,
    version: u64,
}

impl RuleTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, flow_id: u64) -> Option<&FlowRule> {
        self.rules.get(&flow_id)
    }

    /// Installs or replaces the rule for `flow_id`; returns the new version.
    pub fn update_rule(&mut self, flow_id: u64, primary: NfId, secondary: Option<NfId>) -> Result<u64, RuleError> {
        if secondary == Some(primary) {
            return Err(RuleError::SameTargets(flow_id));
        }
        self.version += 1;
        self.rules
            .insert(flow_id, FlowRule { flow_id, primary_nf: primary, secondary_nf: secondary, version: self.version });
        Ok(self.version)
    }

    pub fn flows_with_primary(&self, nf: NfId) -> Vec<u64> {
        self.rules.values().filter(|r| r.primary_nf == nf).map(|r| r.flow_id).collect()
    }

    pub fn flows_with_secondary(&self, nf: NfId) -> Vec<u64> {
        self.rules.values().filter(|r| r.secondary_nf == Some(nf)).map(|r| r.flow_id).collect()
    }

    pub fn rules(&self) -> impl Iterator<Item = &FlowRule> {
        self.rules.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkClass {
    /// Packet traffic: jitter and reordering apply.
    Data,
    /// RPCs and protocol messages: fixed latency, FIFO per directed link.
    Control,
}

#[derive(Debug, Clone)]
pub struct NetParams {
    pub base_latency_ns: Nanos,
    pub jitter_ns: Nanos,
    pub reorder_prob: f64,
    pub reorder_penalty_ns: Nanos,
    pub ctrl_latency_ns: Nanos,
    pub seed: u64,
}

impl Default for NetParams {
    fn default() -> Self {
        Self {
            base_latency_ns: 100_000,
            jitter_ns: 0,
            reorder_prob: 0.0,
            reorder_penalty_ns: 500_000,
            ctrl_latency_ns: 300_000,
            seed: 0,
        }
    }
}

/// Lossless network with seeded latency sampling.
#[derive(Debug, Clone)]
pub struct SimNet {
    pub params: NetParams,
    rng: ChaCha8Rng,
    ctrl_tail: HashMap<(Actor, Actor), Nanos>,
}

impl SimNet {
    pub fn new(params: NetParams) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        Self { params, rng, ctrl_tail: HashMap::new() }
    }

    /// Absolute delivery time of a message sent now from `src` to `dst`.
    pub fn sample_delivery(&mut self, now: Nanos, src: Actor, dst: Actor, class: LinkClass) -> Nanos {
        match class {
            LinkClass::Data => {
                let u: f64 = self.rng.gen();
                let r: f64 = self.rng.gen();
                let mut t = now + self.params.base_latency_ns + (self.params.jitter_ns as f64 * u) as Nanos;
                if r < self.params.reorder_prob {
                    t += self.params.reorder_penalty_ns;
                }
                t
            }
            LinkClass::Control => {
                let tail = self.ctrl_tail.entry((src, dst)).or_insert(0);
                let t = (now + self.params.ctrl_latency_ns).max(*tail);
                *tail = t;
                t
            }
        }
    }
}

struct Entry<E> {
    time: Nanos,
    seq: u64,
    ev: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Time-ordered queue; ties break by insertion order.
pub struct Scheduler<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    now: Nanos,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), seq: 0, now: 0 }
    }
}

impl<E> Scheduler<E> {
    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn at(&mut self, time: Nanos, ev: E) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.heap.push(Entry { time, seq: self.seq, ev });
    }

    pub fn after(&mut self, delay: Nanos, ev: E) {
        self.at(self.now + delay, ev);
    }

    pub fn pop(&mut self) -> Option<(Nanos, E)> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.ev))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nf(n: u32) -> Actor {
        Actor::Nf(NfId(n))
    }

    #[test]
    fn rule_last_writer_wins() {
        let mut t = RuleTable::new();
        let v1 = t.update_rule(7, NfId(1), Some(NfId(2))).unwrap();
        let v2 = t.update_rule(7, NfId(3), Some(NfId(4))).unwrap();
        assert!(v2 > v1);
        let r = t.lookup(7).unwrap();
        assert_eq!((r.primary_nf, r.secondary_nf, r.version), (NfId(3), Some(NfId(4)), v2));
    }

    #[test]
    fn rule_rejects_same_targets() {
        let mut t = RuleTable::new();
        assert_eq!(t.update_rule(1, NfId(2), Some(NfId(2))), Err(RuleError::SameTargets(1)));
        assert!(t.lookup(1).is_none());
    }

    #[test]
    fn fixed_latency_without_jitter() {
        let mut n = SimNet::new(NetParams { jitter_ns: 0, reorder_prob: 0.0, ..NetParams::default() });
        assert_eq!(n.sample_delivery(1000, Actor::Switch, nf(1), LinkClass::Data), 101_000);
    }

    #[test]
    fn same_seed_same_times() {
        let p = NetParams { jitter_ns: 50_000, reorder_prob: 0.2, seed: 99, ..NetParams::default() };
        let mut a = SimNet::new(p.clone());
        let mut b = SimNet::new(p);
        for i in 0..1000 {
            assert_eq!(
                a.sample_delivery(i * 10, Actor::Switch, nf(1), LinkClass::Data),
                b.sample_delivery(i * 10, Actor::Switch, nf(1), LinkClass::Data)
            );
        }
    }

    #[test]
    fn control_links_are_fifo() {
        let mut n = SimNet::new(NetParams::default());
        let t1 = n.sample_delivery(0, nf(1), nf(2), LinkClass::Control);
        let t2 = n.sample_delivery(5, nf(1), nf(2), LinkClass::Control);
        assert!(t2 >= t1);
    }

    /// Fraction of messages that are delivered after some later-sent message.
    fn overtaken_fraction(times: &[Nanos]) -> f64 {
        let mut min_after = Nanos::MAX;
        let mut overtaken = 0usize;
        for &t in times.iter().rev() {
            if min_after < t {
                overtaken += 1;
            }
            min_after = min_after.min(t);
        }
        overtaken as f64 / times.len() as f64
    }

    #[test]
    fn reorder_fraction_matches_configuration() {
        let mut n = SimNet::new(NetParams { reorder_prob: 0.3, seed: 5, ..NetParams::default() });
        let times: Vec<Nanos> =
            (0..10_000).map(|i| n.sample_delivery(i * 1_000, Actor::Switch, nf(1), LinkClass::Data)).collect();
        let frac = overtaken_fraction(&times);
        assert!((frac - 0.3).abs() <= 0.05, "measured {frac}");
    }

    #[test]
    fn scheduler_orders_by_time_then_insertion() {
        let mut s = Scheduler::default();
        s.at(5, "b");
        s.at(1, "a");
        s.at(5, "c");
        let order: Vec<_> = std::iter::from_fn(|| s.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }
}
