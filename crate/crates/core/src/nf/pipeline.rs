//! Input buffer, ordering gate and output buffer of one NF.
//!
//! The gate admits a packet only when its counter equals the flow's entry in
//! the next-expected map; early packets wait in a per-flow min-heap.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::{Packet, PacketId};

/// flow id -> counter of the next packet that may be processed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextExpectedMap(pub BTreeMap<u64, u64>);

impl NextExpectedMap {
    pub fn get(&self, flow: u64) -> u64 {
        self.0.get(&flow).copied().unwrap_or(1)
    }

    pub fn set(&mut self, flow: u64, next: u64) {
        self.0.insert(flow, next);
    }

    /// Entry-wise maximum; entries never move backwards.
    pub fn merge_max(&mut self, other: &NextExpectedMap) {
        for (&f, &n) in &other.0 {
            let e = self.0.entry(f).or_insert(1);
            *e = (*e).max(n);
        }
    }

    pub fn covers(&self, id: PacketId) -> bool {
        id.counter < self.get(id.flow_id)
    }
}

/// Per-flow local state of the generic NF.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalState {
    pub pkt_count: u64,
    pub byte_sum: u64,
}

impl LocalState {
    pub fn apply(&mut self, payload_len: u32) {
        self.pkt_count += 1;
        self.byte_sum += payload_len as u64;
    }
}

pub type LocalStateMap = BTreeMap<u64, LocalState>;

/// Per flow: counters dropped at an input buffer.
pub type DropSet = BTreeMap<u64, BTreeSet<u64>>;

struct Queued(Packet);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.id.counter.cmp(&other.0.id.counter)
    }
}

#[derive(Default)]
pub struct PendingList {
    flows: BTreeMap<u64, BinaryHeap<Reverse<Queued>>>,
    ids: BTreeSet<PacketId>,
}

impl PendingList {
    /// Returns false if the id is already queued.
    pub fn insert(&mut self, p: Packet) -> bool {
        if !self.ids.insert(p.id) {
            return false;
        }
        self.flows.entry(p.id.flow_id).or_default().push(Reverse(Queued(p)));
        true
    }

    pub fn head(&self, flow: u64) -> Option<PacketId> {
        self.flows.get(&flow).and_then(|h| h.peek()).map(|Reverse(q)| q.0.id)
    }

    pub fn pop(&mut self, flow: u64) -> Option<Packet> {
        let heap = self.flows.get_mut(&flow)?;
        let Reverse(Queued(p)) = heap.pop()?;
        if heap.is_empty() {
            self.flows.remove(&flow);
        }
        self.ids.remove(&p.id);
        Some(p)
    }

    pub fn take_flow(&mut self, flow: u64) -> Vec<Packet> {
        let mut out = Vec::new();
        while let Some(p) = self.pop(flow) {
            out.push(p);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn flows(&self) -> impl Iterator<Item = u64> + '_ {
        self.flows.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn packets(&self) -> impl Iterator<Item = &Packet> {
        self.flows.values().flat_map(|h| h.iter().map(|Reverse(q)| &q.0))
    }
}

#[derive(Debug)]
pub struct InputBuffer {
    queue: VecDeque<Packet>,
    /// `None` is unbounded.
    pub capacity: Option<usize>,
    pub drop_count: u64,
}

impl InputBuffer {
    pub fn new(capacity: Option<usize>) -> Self {
        Self { queue: VecDeque::new(), capacity, drop_count: 0 }
    }

    /// Appends `p`; returns it back if the buffer is full.
    pub fn push(&mut self, p: Packet) -> Result<(), Packet> {
        if self.capacity.is_some_and(|c| self.queue.len() >= c) {
            self.drop_count += 1;
            return Err(p);
        }
        self.queue.push_back(p);
        Ok(())
    }

    /// Appends without a capacity check; used for packets accepted elsewhere.
    pub fn push_unchecked(&mut self, p: Packet) {
        self.queue.push_back(p);
    }

    pub fn push_front_unchecked(&mut self, p: Packet) {
        self.queue.push_front(p);
    }

    pub fn pop(&mut self) -> Option<Packet> {
        self.queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn extract_flow(&mut self, flow: u64) -> Vec<Packet> {
        let (out, keep): (Vec<_>, Vec<_>) = self.queue.drain(..).partition(|p| p.id.flow_id == flow);
        self.queue = keep.into();
        out
    }

    pub fn packets(&self) -> impl Iterator<Item = &Packet> {
        self.queue.iter()
    }
}

#[derive(Debug)]
pub struct OutputBuffer {
    packets: Vec<Packet>,
    pub capacity: usize,
}

impl OutputBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { packets: Vec::with_capacity(capacity), capacity }
    }

    pub fn is_full(&self) -> bool {
        self.packets.len() >= self.capacity
    }

    pub fn push(&mut self, p: Packet) {
        debug_assert!(!self.is_full());
        self.packets.push(p);
    }

    pub fn take_all(&mut self) -> Vec<Packet> {
        std::mem::take(&mut self.packets)
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn packets(&self) -> &[Packet] {
        &self.packets
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Step {
    /// This packet matches the gate and should be processed now.
    Ready(Packet),
    /// Output buffer is full; nothing was popped.
    StalledOnOutput,
    /// The popped packet was parked in the pending list.
    StalledOnOrder(PacketId),
    /// The popped packet belongs to a flow held aside (migration).
    Diverted(Packet),
    /// The popped packet was already processed; it was discarded.
    Stale(PacketId),
    Idle,
}

pub struct Pipeline {
    pub input: InputBuffer,
    pub pending: PendingList,
    pub output: OutputBuffer,
    pub next_expected: NextExpectedMap,
    /// Counters dropped at the input, skipped by the gate.
    dropped: DropSet,
    /// Flows whose packets are diverted instead of processed.
    pub held_flows: BTreeSet<u64>,
    /// Flows whose pending list should be checked before the input.
    drain: BTreeSet<u64>,
    /// Testing hook: admit packets regardless of order.
    pub bypass_gate: bool,
}

impl Pipeline {
    pub fn new(batch_size: usize, input_capacity: Option<usize>) -> Self {
        Self {
            input: InputBuffer::new(input_capacity),
            pending: PendingList::default(),
            output: OutputBuffer::new(batch_size),
            next_expected: NextExpectedMap::default(),
            dropped: BTreeMap::new(),
            held_flows: BTreeSet::new(),
            drain: BTreeSet::new(),
            bypass_gate: false,
        }
    }

    /// Records an input drop so the gate does not wait for it.
    pub fn mark_dropped(&mut self, id: PacketId) {
        let next = self.next_expected.get(id.flow_id);
        if id.counter < next {
            return;
        }
        self.dropped.entry(id.flow_id).or_default().insert(id.counter);
        self.advance_past_drops(id.flow_id);
        self.drain.insert(id.flow_id);
    }

    /// Gate skips learned from another NF.
    pub fn install_drops(&mut self, flow: u64, counters: &BTreeSet<u64>) {
        let next = self.next_expected.get(flow);
        let set = self.dropped.entry(flow).or_default();
        set.extend(counters.range(next..));
        self.advance_past_drops(flow);
        self.drain.insert(flow);
    }

    fn advance_past_drops(&mut self, flow: u64) {
        let Some(set) = self.dropped.get_mut(&flow) else { return };
        let mut next = self.next_expected.get(flow);
        while set.remove(&next) {
            next += 1;
        }
        if set.is_empty() {
            self.dropped.remove(&flow);
        }
        self.next_expected.set(flow, next);
    }

    /// One iteration of the processing loop.
    pub fn step(&mut self) -> Step {
        if self.output.is_full() {
            return Step::StalledOnOutput;
        }
        while let Some(&flow) = self.drain.first() {
            let next = self.next_expected.get(flow);
            if let Some(head) = self.pending.head(flow) {
                if head.counter < next {
                    self.pending.pop(flow);
                    return Step::Stale(head);
                }
                if head.counter == next && !self.held_flows.contains(&flow) {
                    return Step::Ready(self.pending.pop(flow).expect("head exists"));
                }
            }
            self.drain.remove(&flow);
        }
        let Some(p) = self.input.pop() else { return Step::Idle };
        let flow = p.id.flow_id;
        if self.held_flows.contains(&flow) {
            return Step::Diverted(p);
        }
        let next = self.next_expected.get(flow);
        if self.bypass_gate {
            return Step::Ready(p);
        }
        match p.id.counter.cmp(&next) {
            std::cmp::Ordering::Less => Step::Stale(p.id),
            std::cmp::Ordering::Equal => Step::Ready(p),
            std::cmp::Ordering::Greater => {
                let id = p.id;
                if self.pending.insert(p) {
                    Step::StalledOnOrder(id)
                } else {
                    Step::Stale(id)
                }
            }
        }
    }

    /// Marks `id` processed: advances the gate and schedules a pending check.
    pub fn complete(&mut self, id: PacketId) {
        let flow = id.flow_id;
        let next = self.next_expected.get(flow);
        if id.counter >= next {
            self.next_expected.set(flow, id.counter + 1);
        }
        self.advance_past_drops(flow);
        self.drain.insert(flow);
    }

    /// Takes every queued packet of `flow` out of the input and pending list.
    pub fn hold_flow(&mut self, flow: u64) -> Vec<Packet> {
        self.held_flows.insert(flow);
        let mut out = self.pending.take_flow(flow);
        out.extend(self.input.extract_flow(flow));
        out.sort_by_key(|p| p.id.counter);
        out
    }

    pub fn release_flow(&mut self, flow: u64) {
        self.held_flows.remove(&flow);
        self.drain.insert(flow);
    }

    pub fn wake(&mut self, flow: u64) {
        self.drain.insert(flow);
    }

    pub fn wake_all(&mut self) {
        let flows: Vec<u64> = self.pending.flows().collect();
        self.drain.extend(flows);
    }

    pub fn is_quiet(&self) -> bool {
        self.input.is_empty() && self.pending.is_empty() && self.output.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlowKey, Timing};
    use proptest::prelude::*;

    fn pkt(flow: u64, counter: u64) -> Packet {
        Packet {
            id: PacketId::new(flow, counter),
            key: FlowKey::new(0, 0, 0, 0, 17),
            payload_len: 64,
            stamp_time: 0,
            work_cost: 0,
            global_update_flag: false,
            seq: 0,
            timing: Timing::default(),
        }
    }

    /// Runs the gate to exhaustion, returning processed ids in order.
    fn run(p: &mut Pipeline) -> Vec<PacketId> {
        let mut done = Vec::new();
        loop {
            match p.step() {
                Step::Ready(pk) => {
                    p.complete(pk.id);
                    done.push(pk.id);
                    p.output.push(pk);
                    if p.output.is_full() {
                        p.output.take_all();
                    }
                }
                Step::Idle => {
                    if p.drain.is_empty() {
                        break;
                    }
                }
                Step::StalledOnOutput => unreachable!(),
                _ => {}
            }
        }
        done
    }

    #[test]
    fn early_packet_waits_for_predecessor() {
        let mut p = Pipeline::new(10, None);
        p.input.push(pkt(1, 2)).unwrap();
        p.input.push(pkt(1, 1)).unwrap();
        assert_eq!(p.step(), Step::StalledOnOrder(PacketId::new(1, 2)));
        assert_eq!(run(&mut p), vec![PacketId::new(1, 1), PacketId::new(1, 2)]);
    }

    #[test]
    fn full_output_pops_nothing() {
        let mut p = Pipeline::new(1, None);
        p.output.push(pkt(9, 1));
        p.input.push(pkt(1, 1)).unwrap();
        assert_eq!(p.step(), Step::StalledOnOutput);
        assert_eq!(p.input.len(), 1);
    }

    #[test]
    fn expected_is_one_plus_processed() {
        let mut p = Pipeline::new(50, None);
        for c in 1..=5 {
            p.input.push(pkt(12, c)).unwrap();
        }
        run(&mut p);
        assert_eq!(p.next_expected.get(12), 6);
    }

    #[test]
    fn input_drops_beyond_capacity() {
        let mut b = InputBuffer::new(Some(2));
        assert!(b.push(pkt(1, 1)).is_ok());
        assert_eq!(b.len(), 1);
        b.push(pkt(1, 2)).unwrap();
        assert!(b.push(pkt(1, 3)).is_err());
        assert_eq!(b.drop_count, 1);
    }

    #[test]
    fn dropped_counter_is_skipped() {
        let mut p = Pipeline::new(50, None);
        p.input.push(pkt(3, 1)).unwrap();
        p.input.push(pkt(3, 3)).unwrap();
        p.mark_dropped(PacketId::new(3, 2));
        assert_eq!(run(&mut p), vec![PacketId::new(3, 1), PacketId::new(3, 3)]);
    }

    #[test]
    fn stale_duplicate_is_discarded() {
        let mut p = Pipeline::new(50, None);
        p.next_expected.set(4, 10);
        p.input.push(pkt(4, 7)).unwrap();
        assert_eq!(p.step(), Step::Stale(PacketId::new(4, 7)));
    }

    #[test]
    fn held_flow_is_diverted() {
        let mut p = Pipeline::new(50, None);
        p.input.push(pkt(1, 2)).unwrap();
        p.step();
        p.input.push(pkt(1, 3)).unwrap();
        p.input.push(pkt(2, 1)).unwrap();
        let held = p.hold_flow(1);
        assert_eq!(held.iter().map(|x| x.id.counter).collect::<Vec<_>>(), vec![2, 3]);
        p.input.push(pkt(1, 4)).unwrap();
        assert!(matches!(p.step(), Step::Ready(x) if x.id == PacketId::new(2, 1)));
        assert!(matches!(p.step(), Step::Diverted(x) if x.id == PacketId::new(1, 4)));
    }

    proptest! {
        /// Any arrival permutation is processed in per-flow counter order.
        #[test]
        fn processes_in_counter_order(
            order in Just((0..60usize).collect::<Vec<_>>()).prop_shuffle(),
            batch in 1usize..20,
        ) {
            let packets: Vec<Packet> = (0..60u64).map(|i| pkt(i % 4, i / 4 + 1)).collect();
            let mut p = Pipeline::new(batch, None);
            for i in order {
                p.input.push(packets[i].clone()).unwrap();
            }
            let done = run(&mut p);
            prop_assert_eq!(done.len(), 60);
            // Oracle: per-flow sort by counter.
            for flow in 0..4u64 {
                let seq: Vec<u64> = done.iter().filter(|id| id.flow_id == flow).map(|id| id.counter).collect();
                prop_assert_eq!(seq, (1..=15).collect::<Vec<_>>());
            }
            prop_assert!(p.pending.is_empty());
        }
    }
}
