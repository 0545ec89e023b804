//! Sequential reference processor and the trace checker built on it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::Serialize;

use crate::consensus::GlobalUpdate;
use crate::harness::traffic::Arrival;
use crate::model::{Actor, EventKind, NfId, PacketId, TraceEvent};
use crate::nf::pipeline::LocalState;
use crate::sim::FinalState;

/// One entry of the stamped stream, as the oracle needs it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StampedPacket {
    pub id: PacketId,
    pub payload_len: u32,
    pub global: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleResult {
    pub local: BTreeMap<u64, LocalState>,
    pub global: BTreeMap<u64, i64>,
    /// Counters each flow must release, in release order.
    pub releases: BTreeMap<u64, Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("packet {0} appears twice in the stamped stream")]
    DuplicateId(PacketId),
    #[error("trace has {stamped} stamper events but the schedule has {arrivals} arrivals")]
    StreamMismatch { stamped: usize, arrivals: usize },
}

pub fn run_oracle(
    stream: &[StampedPacket],
    dropped: &BTreeSet<PacketId>,
    global_keys: u64,
) -> Result<OracleResult, OracleError> {
    let mut seen = HashSet::with_capacity(stream.len());
    for p in stream {
        if !seen.insert(p.id) {
            return Err(OracleError::DuplicateId(p.id));
        }
    }
    let mut survivors: Vec<&StampedPacket> = stream.iter().filter(|p| !dropped.contains(&p.id)).collect();
    survivors.sort_by_key(|p| p.id);
    let mut out = OracleResult::default();
    for p in survivors {
        let flow = p.id.flow_id;
        out.local.entry(flow).or_default().apply(p.payload_len);
        if p.global {
            *out.global.entry(flow % global_keys).or_insert(0) += 1;
        }
        out.releases.entry(flow).or_default().push(p.id.counter);
    }
    Ok(out)
}

/// Rebuilds the stamped stream by pairing stamper events with the schedule.
pub fn stamped_stream(trace: &[TraceEvent], arrivals: &[Arrival]) -> Result<Vec<StampedPacket>, OracleError> {
    let stamper: Vec<&TraceEvent> = trace
        .iter()
        .filter(|e| e.actor.is_stamping() && matches!(e.kind, EventKind::Stamped | EventKind::Dropped))
        .collect();
    if stamper.len() != arrivals.len() {
        return Err(OracleError::StreamMismatch { stamped: stamper.len(), arrivals: arrivals.len() });
    }
    Ok(stamper
        .iter()
        .zip(arrivals)
        .filter(|(e, _)| e.kind == EventKind::Stamped)
        .filter_map(|(e, a)| e.packet.map(|id| StampedPacket { id, payload_len: a.payload_len, global: a.global }))
        .collect())
}

/// Input drops that no NF later made up for by releasing the packet.
pub fn effective_drops(trace: &[TraceEvent]) -> BTreeSet<PacketId> {
    let released: HashSet<PacketId> =
        trace.iter().filter(|e| e.kind == EventKind::Released).filter_map(|e| e.packet).collect();
    trace
        .iter()
        .filter(|e| e.kind == EventKind::Dropped && matches!(e.actor, Actor::Nf(_)))
        .filter_map(|e| e.packet)
        .filter(|id| !released.contains(id))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum FindingKind {
    DuplicateRelease,
    MissingRelease,
    UnexpectedRelease,
    ReleaseOrder,
    ProcessingOrder,
    Causality,
    ClockLag,
    DuplicateGlobalEntry,
    GlobalTotalMismatch,
    LocalStateMismatch,
    LogDivergence,
    OriginOrder,
    SecondaryDivergence,
    Placement,
    Unrecoverable,
    NotQuiescent,
    InputCorruption,
}

#[derive(Debug, Clone, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub detail: String,
    /// First offending trace line, if the finding points at one.
    pub event: Option<String>,
}

impl Finding {
    fn new(kind: FindingKind, detail: impl Into<String>, event: Option<&TraceEvent>) -> Self {
        Self { kind, detail: detail.into(), event: event.map(TraceEvent::to_json_line) }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub packets_checked: usize,
    pub releases_checked: usize,
    pub findings: Vec<Finding>,
}

impl Verdict {
    pub fn from_findings(findings: Vec<Finding>, packets: usize, releases: usize) -> Self {
        Self { pass: findings.is_empty(), packets_checked: packets, releases_checked: releases, findings }
    }

    pub fn has(&self, kind: FindingKind) -> bool {
        self.findings.iter().any(|f| f.kind == kind)
    }

    pub fn kinds(&self) -> BTreeSet<FindingKind> {
        self.findings.iter().map(|f| f.kind).collect()
    }
}

/// Checks only need the first few examples of each kind.
const MAX_PER_KIND: usize = 20;

#[derive(Default)]
struct Findings {
    list: Vec<Finding>,
    per_kind: BTreeMap<FindingKind, usize>,
}

impl Findings {
    fn push(&mut self, kind: FindingKind, detail: impl Into<String>, ev: Option<&TraceEvent>) {
        let n = self.per_kind.entry(kind).or_insert(0);
        *n += 1;
        if *n <= MAX_PER_KIND {
            self.list.push(Finding::new(kind, detail, ev));
        }
    }
}

/// Trace-level comparison against the oracle.
pub fn compare_trace(trace: &[TraceEvent], oracle: &OracleResult, global_keys: u64) -> Vec<Finding> {
    let mut f = Findings::default();
    let had_failure = trace.iter().any(|e| e.kind == EventKind::Failure);

    let mut arrived: HashSet<PacketId> = HashSet::new();
    let mut processed: HashSet<PacketId> = HashSet::new();
    let mut released: HashMap<PacketId, usize> = HashMap::new();
    let mut last_release: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last_by_actor: HashMap<(Actor, u64), u64> = HashMap::new();
    let mut first_seq: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let mut clocks: BTreeMap<Actor, (Option<u64>, Option<u64>)> = BTreeMap::new();
    let mut committed_origin: HashSet<PacketId> = HashSet::new();
    let mut commits_per_key: BTreeMap<u64, i64> = BTreeMap::new();
    let mut dropped_at: HashSet<(Actor, PacketId)> = HashSet::new();
    let expected: HashSet<PacketId> =
        oracle.releases.iter().flat_map(|(&flow, cs)| cs.iter().map(move |&c| PacketId::new(flow, c))).collect();

    for ev in trace {
        match ev.kind {
            EventKind::NfIn => {
                if let Some(id) = ev.packet {
                    arrived.insert(id);
                }
            }
            EventKind::Dropped => {
                if let Some(id) = ev.packet {
                    dropped_at.insert((ev.actor, id));
                }
            }
            EventKind::Processed => {
                let Some(id) = ev.packet else { continue };
                if !arrived.contains(&id) {
                    f.push(FindingKind::Causality, format!("{id} processed before reaching any NF"), Some(ev));
                }
                let key = (ev.actor, id.flow_id);
                if let Some(&prev) = last_by_actor.get(&key) {
                    if id.counter <= prev {
                        f.push(
                            FindingKind::ProcessingOrder,
                            format!("{} processed {id} after counter {prev}", ev.actor),
                            Some(ev),
                        );
                    } else if had_failure {
                        // a gap must be a drop at this NF, work done elsewhere, or never processed at all
                        let skipped = (prev + 1..id.counter).map(|c| PacketId::new(id.flow_id, c)).find(|k| {
                            !dropped_at.contains(&(ev.actor, *k)) && !processed.contains(k) && expected.contains(k)
                        });
                        if let Some(k) = skipped {
                            f.push(
                                FindingKind::ProcessingOrder,
                                format!("{} processed {id} before {k}", ev.actor),
                                Some(ev),
                            );
                        }
                    }
                }
                last_by_actor.insert(key, id.counter);
                if processed.insert(id) {
                    first_seq.entry(id.flow_id).or_default().push(id.counter);
                } else if !had_failure {
                    f.push(FindingKind::ProcessingOrder, format!("{id} processed twice without a failure"), Some(ev));
                }
            }
            EventKind::Released => {
                let Some(id) = ev.packet else { continue };
                if !processed.contains(&id) {
                    f.push(FindingKind::Causality, format!("{id} released before being processed"), Some(ev));
                }
                let n = released.entry(id).or_insert(0);
                *n += 1;
                if *n > 1 {
                    f.push(FindingKind::DuplicateRelease, format!("{id} released {} times", *n), Some(ev));
                }
                let last = last_release.entry(id.flow_id).or_insert(0);
                if id.counter <= *last && *n == 1 {
                    f.push(
                        FindingKind::ReleaseOrder,
                        format!("{id} released after counter {} of its flow", *last),
                        Some(ev),
                    );
                }
                *last = (*last).max(id.counter);
            }
            EventKind::PacketClockCommit | EventKind::StateClockCommit => {
                let Some(b) = ev.batch else { continue };
                let c = clocks.entry(ev.actor).or_default();
                if ev.kind == EventKind::PacketClockCommit {
                    c.0 = Some(b.0);
                } else {
                    c.1 = Some(b.0);
                }
                if let (Some(i), Some(j)) = *c {
                    if !(j <= i && i <= j + 1) {
                        f.push(FindingKind::ClockLag, format!("{}: i={i} j={j}", ev.actor), Some(ev));
                    }
                }
            }
            EventKind::GlobalCommitDone if ev.actor == Actor::Consensus => {
                let Some(id) = ev.packet else { continue };
                if !committed_origin.insert(id) {
                    f.push(FindingKind::DuplicateGlobalEntry, format!("{id} committed to the log twice"), Some(ev));
                }
                *commits_per_key.entry(id.flow_id % global_keys).or_insert(0) += 1;
            }
            _ => {}
        }
    }

    for (&flow, want) in &oracle.releases {
        let got = first_seq.get(&flow).map(Vec::as_slice).unwrap_or(&[]);
        // after a failure, work lost with the failed NF may be redone in a different order
        if !had_failure && got != want.as_slice() {
            let at = got.iter().zip(want).position(|(a, b)| a != b).unwrap_or(got.len().min(want.len()));
            f.push(
                FindingKind::ProcessingOrder,
                format!(
                    "flow {flow}: processing diverges at position {at} (got {:?}, expected {:?})",
                    got.get(at),
                    want.get(at)
                ),
                None,
            );
        }
        for &c in want {
            if !released.contains_key(&PacketId::new(flow, c)) {
                f.push(FindingKind::MissingRelease, format!("{} never released", PacketId::new(flow, c)), None);
            }
        }
    }
    let mut unexpected: Vec<&PacketId> = released.keys().filter(|id| !expected.contains(id)).collect();
    unexpected.sort();
    for id in unexpected {
        f.push(FindingKind::UnexpectedRelease, format!("{id} released but not expected"), None);
    }

    let keys: BTreeSet<u64> = oracle.global.keys().chain(commits_per_key.keys()).copied().collect();
    for k in keys {
        let want = oracle.global.get(&k).copied().unwrap_or(0);
        let got = commits_per_key.get(&k).copied().unwrap_or(0);
        if want != got {
            f.push(FindingKind::GlobalTotalMismatch, format!("key {k}: log holds {got} updates, oracle {want}"), None);
        }
    }
    f.list
}

/// End-of-run comparison of live state against the oracle.
pub fn compare_final(fs: &FinalState, trace: &[TraceEvent], oracle: &OracleResult, notes: &[String]) -> Vec<Finding> {
    let mut f = Findings::default();
    for n in notes {
        let kind = if n.starts_with("placement") {
            FindingKind::Placement
        } else if n.starts_with("stuck") {
            FindingKind::NotQuiescent
        } else {
            FindingKind::Unrecoverable
        };
        if !n.starts_with("degraded") {
            f.push(kind, n.clone(), None);
        }
    }
    for (nf, why) in &fs.busy {
        f.push(FindingKind::NotQuiescent, format!("{nf}: {why}"), None);
    }
    for flow in &fs.orphaned {
        f.push(FindingKind::Unrecoverable, format!("flow {flow} is owned by a dead NF"), None);
    }
    for (&flow, want) in &oracle.local {
        let got = fs.owner_state.get(&flow).copied().unwrap_or_default();
        if got != *want {
            f.push(FindingKind::LocalStateMismatch, format!("flow {flow}: owner has {got:?}, oracle {want:?}"), None);
        }
    }
    for (nf, flow) in &fs.mirror_mismatch {
        f.push(FindingKind::SecondaryDivergence, format!("{nf} mirror of flow {flow} differs from its primary"), None);
    }

    let log = &fs.consensus_log;
    for (nf, base, applied, map) in &fs.replicas {
        let start = *base as usize;
        let ok = start + applied.len() == log.len() && log[start..] == applied[..];
        if !ok {
            f.push(
                FindingKind::LogDivergence,
                format!("{nf} applied {} entries from {base}; log has {}", applied.len(), log.len()),
                None,
            );
        }
        let nonzero: BTreeMap<u64, i64> = map.iter().filter(|(_, &v)| v != 0).map(|(&k, &v)| (k, v)).collect();
        if nonzero != oracle.global {
            f.push(
                FindingKind::GlobalTotalMismatch,
                format!("{nf} global map {nonzero:?} != oracle {:?}", oracle.global),
                None,
            );
        }
    }
    check_origin_order(&mut f, log, trace);
    f.list
}

/// Each NF's log entries follow that NF's processing order.
fn check_origin_order(f: &mut Findings, log: &[GlobalUpdate], trace: &[TraceEvent]) {
    let mut pos: HashMap<(NfId, PacketId), usize> = HashMap::new();
    for (i, ev) in trace.iter().enumerate() {
        if let (EventKind::GlobalCommitStart, Actor::Nf(nf), Some(id)) = (ev.kind, ev.actor, ev.packet) {
            pos.entry((nf, id)).or_insert(i);
        }
    }
    let mut last: BTreeMap<NfId, usize> = BTreeMap::new();
    for (idx, u) in log.iter().enumerate() {
        let Some(&p) = pos.get(&(u.origin_nf, u.origin_pkt)) else {
            f.push(FindingKind::OriginOrder, format!("log entry {idx} has no submission by {}", u.origin_nf), None);
            continue;
        };
        if let Some(&prev) = last.get(&u.origin_nf) {
            if p < prev {
                f.push(
                    FindingKind::OriginOrder,
                    format!("log entry {idx} of {} is out of processing order", u.origin_nf),
                    None,
                );
            }
        }
        last.insert(u.origin_nf, p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(flow: u64, c: u64, global: bool) -> StampedPacket {
        StampedPacket { id: PacketId::new(flow, c), payload_len: 64, global }
    }

    #[test]
    fn empty_stream() {
        assert_eq!(run_oracle(&[], &BTreeSet::new(), 1).unwrap(), OracleResult::default());
    }

    #[test]
    fn one_flow_hundred_packets() {
        let s: Vec<_> = (1..=100).map(|c| sp(1, c, false)).collect();
        let r = run_oracle(&s, &BTreeSet::new(), 1).unwrap();
        assert_eq!(r.local[&1], LocalState { pkt_count: 100, byte_sum: 6400 });
    }

    #[test]
    fn global_total_is_flag_count() {
        let s: Vec<_> = (0..5).flat_map(|f| (1..=20).map(move |c| sp(f, c, c % 2 == 0))).collect();
        let brute = s.iter().filter(|p| p.global).count() as i64;
        let r = run_oracle(&s, &BTreeSet::new(), 1).unwrap();
        assert_eq!(r.global[&0], brute);
        assert_eq!(brute, 50);
    }

    #[test]
    fn duplicate_id_is_corruption() {
        assert_eq!(
            run_oracle(&[sp(1, 1, false), sp(1, 1, false)], &BTreeSet::new(), 1),
            Err(OracleError::DuplicateId(PacketId::new(1, 1)))
        );
    }

    #[test]
    fn dropped_packets_are_excluded() {
        let s: Vec<_> = (1..=5).map(|c| sp(3, c, false)).collect();
        let dropped = [PacketId::new(3, 2)].into_iter().collect();
        let r = run_oracle(&s, &dropped, 1).unwrap();
        assert_eq!(r.releases[&3], vec![1, 3, 4, 5]);
    }

    #[test]
    fn oracle_ignores_stream_order() {
        let mut s: Vec<_> = (0..3).flat_map(|f| (1..=10).map(move |c| sp(f, c, c == 5))).collect();
        let a = run_oracle(&s, &BTreeSet::new(), 2).unwrap();
        s.reverse();
        assert_eq!(run_oracle(&s, &BTreeSet::new(), 2).unwrap(), a);
    }
}
