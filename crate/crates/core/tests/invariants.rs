//! System-wide invariants, checked after every simulation event and over
//! finished traces of random runs.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use common::{random_config, Shape};
use nfstate::config::{ExperimentConfig, Mutation};
use nfstate::harness;
use nfstate::model::{trace_hash, Actor, EventKind, NfId, PacketId, TraceEvent};
use nfstate::nf::Role;
use nfstate::oracle;
use nfstate::sim::Sim;
use proptest::prelude::*;

/// Steps `cfg` to completion, checking per-event invariants; returns the
/// first violation.
fn step_checked(cfg: &ExperimentConfig) -> Result<(), String> {
    let mut sim = Sim::new(cfg);
    let mut versions: BTreeMap<u64, u64> = BTreeMap::new();
    let mut next_seen: BTreeMap<(NfId, u64), u64> = BTreeMap::new();
    let capacity = cfg.nf.input_capacity();
    let bounded = cfg.scenario.is_empty() && cfg.crash.is_empty();
    let mut steps = 0u64;
    while sim.step() {
        steps += 1;
        let t = sim.ctx.now();
        let v = sim.ctl.placement.violations();
        if !v.is_empty() {
            return Err(format!("t={t}: pairs share a node: {v:?}"));
        }
        for r in sim.rules.rules() {
            if r.secondary_nf == Some(r.primary_nf) {
                return Err(format!("t={t}: flow {} has primary = secondary", r.flow_id));
            }
            let last = versions.entry(r.flow_id).or_insert(0);
            if r.version < *last {
                return Err(format!("t={t}: flow {} rule version went back", r.flow_id));
            }
            *last = r.version;
        }
        let log = sim.consensus.log();
        for nf in sim.nfs.iter().filter(|n| n.alive) {
            let me = nf.id;
            if let (Some(pc), Some(j)) = (&nf.store.last_packet_clock, nf.store.last_state_clock_batch) {
                let i = pc.batch_id.0;
                if !(j.0 <= i && i <= j.0 + 1) {
                    return Err(format!("t={t}: {me} clock lag i={i} j={}", j.0));
                }
            }
            if nf.role == Role::Primary {
                let mut ids = BTreeSet::new();
                for p in nf.pipe.pending.packets() {
                    if p.id.counter < nf.pipe.next_expected.get(p.id.flow_id) {
                        return Err(format!("t={t}: {me} pending {} is behind the gate", p.id));
                    }
                    if !ids.insert(p.id) {
                        return Err(format!("t={t}: {me} pending holds {} twice", p.id));
                    }
                }
                for (&flow, &next) in &nf.pipe.next_expected.0 {
                    let seen = next_seen.entry((me, flow)).or_insert(next);
                    if next < *seen {
                        return Err(format!("t={t}: {me} next expected of flow {flow} fell to {next}"));
                    }
                    *seen = next;
                }
                if let (true, Some(cap)) = (bounded, capacity) {
                    if nf.pipe.input.len() > cap {
                        return Err(format!("t={t}: {me} input holds {} > {cap}", nf.pipe.input.len()));
                    }
                }
            }
            let r = &nf.replica;
            let end = r.base_index as usize + r.applied.len();
            if end > log.len() || log[r.base_index as usize..end] != r.applied[..] {
                return Err(format!("t={t}: {me} applied log is not a prefix of the committed log"));
            }
        }
    }
    if steps == 0 {
        return Err("no events".into());
    }
    Ok(())
}

/// Stamped counters per flow id must be exactly 1..=n in stamping order.
fn check_stamping(trace: &[TraceEvent]) -> Result<(), String> {
    let mut last: HashMap<u64, u64> = HashMap::new();
    for ev in trace.iter().filter(|e| e.kind == EventKind::Stamped) {
        let id = ev.packet.expect("stamped events carry an id");
        let prev = last.insert(id.flow_id, id.counter).unwrap_or(0);
        if id.counter != prev + 1 {
            return Err(format!("{id} stamped after counter {prev}"));
        }
    }
    Ok(())
}

/// Every SwitchIn is followed by exactly two DupOut of the same packet.
/// A primary promoted with no spare left runs without a backup, so after a
/// failure one copy is allowed.
fn check_duplication(trace: &[TraceEvent]) -> Result<(), String> {
    let failed = trace.iter().any(|e| e.kind == EventKind::Failure);
    let mut ins: HashMap<PacketId, u32> = HashMap::new();
    let mut outs: HashMap<PacketId, u32> = HashMap::new();
    for ev in trace {
        match ev.kind {
            EventKind::SwitchIn => *ins.entry(ev.packet.unwrap()).or_default() += 1,
            EventKind::DupOut => *outs.entry(ev.packet.unwrap()).or_default() += 1,
            _ => {}
        }
    }
    for (id, n) in &ins {
        let got = outs.get(id).copied().unwrap_or(0);
        if got != 2 * n && !(failed && got >= *n && got < 2 * n) {
            return Err(format!("{id}: {n} SwitchIn, {:?} DupOut", outs.get(id)));
        }
    }
    Ok(())
}

/// Throughput recomputed from the trace: per flow, released packets over
/// the span from its first stamp to its last release, summed over flows.
fn trace_throughput(trace: &[TraceEvent]) -> f64 {
    let mut first: HashMap<u64, u64> = HashMap::new();
    let mut span: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for ev in trace {
        let Some(id) = ev.packet else { continue };
        match ev.kind {
            EventKind::Stamped => {
                first.entry(id.flow_id).or_insert(ev.time);
            }
            EventKind::Released => {
                let e = span.entry(id.flow_id).or_default();
                e.0 += 1;
                e.1 = e.1.max(ev.time);
            }
            _ => {}
        }
    }
    span.iter()
        .filter_map(|(f, &(n, last))| {
            let start = first[f];
            (last > start).then(|| n as f64 * 1e9 / (last - start) as f64)
        })
        .sum()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn per_event_invariants_hold(seed in 1u64..1_000_000, faults in 0u32..=1, migrations in 0u32..=2) {
        let cfg = random_config(seed, Shape { faults, migrations });
        prop_assert_eq!(step_checked(&cfg), Ok(()));
    }

    #[test]
    fn finished_runs_satisfy_trace_properties(seed in 1u64..1_000_000, faults in 0u32..=1, migrations in 0u32..=2) {
        let cfg = random_config(seed, Shape { faults, migrations });
        let r = harness::run(&cfg);
        prop_assert!(r.verdict.pass, "{:?}", r.verdict.findings.first());
        prop_assert_eq!(check_stamping(&r.output.trace), Ok(()));
        prop_assert_eq!(check_duplication(&r.output.trace), Ok(()));

        // metric identities
        let m = r.metrics;
        let l = m.latency;
        prop_assert!(close(m.latency_ns, l.path_ns + l.pre_ns + l.proc_ns + l.post_ns));
        prop_assert!(close(m.throughput_pps, trace_throughput(&r.output.trace)),
            "{} vs {}", m.throughput_pps, trace_throughput(&r.output.trace));
        let input_drops = r.output.trace.iter()
            .filter(|e| e.kind == EventKind::Dropped && matches!(e.actor, Actor::Nf(_)))
            .count() as u64;
        prop_assert_eq!(m.drops, input_drops);

        // replay safety: one log entry per flagged, delivered packet
        let stream = oracle::stamped_stream(&r.output.trace, &r.output.arrivals).unwrap();
        let dropped = oracle::effective_drops(&r.output.trace);
        let flagged = stream.iter().filter(|p| p.global && !dropped.contains(&p.id)).count();
        let logged = r.output.trace.iter()
            .filter(|e| e.kind == EventKind::GlobalCommitDone && e.actor == Actor::Consensus)
            .count();
        prop_assert_eq!(flagged, logged);
    }

    #[test]
    fn runs_are_deterministic(seed in 1u64..1_000_000) {
        let cfg = random_config(seed, Shape { faults: 1, migrations: 1 });
        let a = nfstate::sim::simulate(&cfg).trace;
        let b = nfstate::sim::simulate(&cfg).trace;
        prop_assert_eq!(trace_hash(&a), trace_hash(&b));
    }

    /// The oracle sees only the stamped stream; how the NFs split the work
    /// must not change its answer.
    #[test]
    fn oracle_ignores_distribution(seed in 1u64..1_000_000, primaries in 1u32..=4) {
        let mut one = random_config(seed, Shape { faults: 0, migrations: 0 });
        one.nf.primaries = 1;
        one.nf.buffer_batches = 0;
        let mut many = one.clone();
        many.nf.primaries = primaries;
        let expect = |c: &ExperimentConfig| {
            let out = nfstate::sim::simulate(c);
            let stream = oracle::stamped_stream(&out.trace, &out.arrivals).unwrap();
            oracle::run_oracle(&stream, &BTreeSet::new(), c.nf.global_keys).unwrap()
        };
        prop_assert_eq!(expect(&one), expect(&many));
    }

    #[test]
    fn mutations_never_pass(seed in 1u64..1_000_000) {
        let mut cfg = random_config(seed, Shape { faults: 0, migrations: 0 });
        cfg.nf.buffer_batches = 0;
        cfg.net.reorder_prob = 0.2;
        cfg.traffic.updates_per_batch = cfg.traffic.updates_per_batch.max(1);
        cfg.run.mutation = Mutation::BypassPendingList;
        let r = harness::run(&cfg);
        // only runs where some primary saw a flow out of order can tell
        let primaries: BTreeSet<Actor> = r.output.trace.iter()
            .filter(|e| e.kind == EventKind::Processed)
            .map(|e| e.actor)
            .collect();
        let mut last: HashMap<(Actor, u64), u64> = HashMap::new();
        let mut reordered = false;
        for e in r.output.trace.iter().filter(|e| e.kind == EventKind::NfIn && primaries.contains(&e.actor)) {
            let id = e.packet.unwrap();
            let prev = last.insert((e.actor, id.flow_id), id.counter).unwrap_or(0);
            reordered |= id.counter < prev;
        }
        prop_assert!(!reordered || !r.verdict.pass);
    }
}
