//! Latency, throughput and drop metrics over a finished run.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::model::{EventKind, Nanos, TraceEvent, MS};
use crate::sim::{ReleaseRecord, RunOutput};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub path_ns: f64,
    pub pre_ns: f64,
    pub proc_ns: f64,
    pub post_ns: f64,
}

impl LatencyBreakdown {
    pub fn total_ns(&self) -> f64 {
        self.path_ns + self.pre_ns + self.proc_ns + self.post_ns
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub latency: LatencyBreakdown,
    pub latency_ns: f64,
    pub throughput_pps: f64,
    pub drops: u64,
    pub drop_frac: f64,
    pub released: u64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str =
        "latency_ns,tau_path_ns,tau_pre_ns,tau_proc_ns,tau_post_ns,throughput_pps,drops,drop_frac";

    pub fn csv_row(&self) -> String {
        let l = &self.latency;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.latency_ns, l.path_ns, l.pre_ns, l.proc_ns, l.post_ns, self.throughput_pps, self.drops, self.drop_frac
        )
    }
}

/// Mean per-stage latency over packets with `seq < tracked_n`.
pub fn latency(releases: &[ReleaseRecord], tracked_n: u64) -> LatencyBreakdown {
    let mut sum = [0f64; 4];
    let mut n = 0usize;
    for r in releases.iter().filter(|r| r.seq < tracked_n) {
        let t = r.timing;
        sum[0] += t.nf_in.saturating_sub(r.stamp_time) as f64;
        sum[1] += t.start.saturating_sub(t.nf_in) as f64;
        sum[2] += t.done.saturating_sub(t.start) as f64;
        sum[3] += r.released_at.saturating_sub(t.done) as f64;
        n += 1;
    }
    if n == 0 {
        return LatencyBreakdown::default();
    }
    let n = n as f64;
    LatencyBreakdown { path_ns: sum[0] / n, pre_ns: sum[1] / n, proc_ns: sum[2] / n, post_ns: sum[3] / n }
}

/// First stamp time of every flow id, dropped packets included.
pub fn flow_starts(trace: &[TraceEvent]) -> BTreeMap<u64, Nanos> {
    let mut starts = BTreeMap::new();
    for ev in trace.iter().filter(|e| e.kind == EventKind::Stamped) {
        if let Some(id) = ev.packet {
            starts.entry(id.flow_id).or_insert(ev.time);
        }
    }
    starts
}

/// Sum over flows of released packets per second of that flow's span,
/// flow start to last release. Flows missing from `starts` start at their
/// earliest released stamp.
pub fn throughput(releases: &[ReleaseRecord], starts: &BTreeMap<u64, Nanos>) -> f64 {
    let mut per_flow: BTreeMap<u64, (u64, Nanos, Nanos)> = BTreeMap::new();
    for r in releases {
        let e = per_flow.entry(r.id.flow_id).or_insert((0, Nanos::MAX, 0));
        e.0 += 1;
        e.1 = e.1.min(r.stamp_time);
        e.2 = e.2.max(r.released_at);
    }
    per_flow
        .iter()
        .map(|(f, &(s, first, last))| (s, starts.get(f).copied().unwrap_or(first), last))
        .filter(|(_, first, last)| last > first)
        .map(|(s, first, last)| s as f64 * 1e9 / (last - first) as f64)
        .sum()
}

pub fn metrics(out: &RunOutput, tracked_n: u64) -> Metrics {
    let latency = latency(&out.releases, tracked_n);
    Metrics {
        latency,
        latency_ns: latency.total_ns(),
        throughput_pps: throughput(&out.releases, &flow_starts(&out.trace)),
        drops: out.stats.input_drops,
        drop_frac: if out.stats.stamped == 0 { 0.0 } else { out.stats.input_drops as f64 / out.stats.stamped as f64 },
        released: out.releases.len() as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Window {
    pub start_ns: Nanos,
    pub throughput_pps: f64,
    pub latency_ns: f64,
}

/// Releases bucketed by release time into fixed windows.
pub fn windows(releases: &[ReleaseRecord], width: Nanos, end: Nanos) -> Vec<Window> {
    let width = width.max(MS);
    let n = end.div_ceil(width) as usize;
    let mut acc = vec![(0u64, 0f64); n.max(1)];
    for r in releases {
        let i = ((r.released_at / width) as usize).min(acc.len() - 1);
        acc[i].0 += 1;
        acc[i].1 += r.released_at.saturating_sub(r.stamp_time) as f64;
    }
    acc.iter()
        .enumerate()
        .map(|(i, &(c, lat))| Window {
            start_ns: i as Nanos * width,
            throughput_pps: c as f64 * 1e9 / width as f64,
            latency_ns: if c == 0 { 0.0 } else { lat / c as f64 },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PacketId, Timing};

    fn rec(seq: u64, flow: u64, stamp: Nanos, nf_in: Nanos, start: Nanos, done: Nanos, rel: Nanos) -> ReleaseRecord {
        ReleaseRecord {
            seq,
            id: PacketId::new(flow, seq + 1),
            stamp_time: stamp,
            timing: Timing { nf_in, start, done },
            released_at: rel,
        }
    }

    #[test]
    fn latency_is_sum_of_stage_means() {
        let r = [rec(0, 1, 0, 10, 30, 60, 100), rec(1, 1, 100, 120, 130, 150, 300)];
        let l = latency(&r, 10);
        assert_eq!(l, LatencyBreakdown { path_ns: 15.0, pre_ns: 15.0, proc_ns: 25.0, post_ns: 95.0 });
        assert_eq!(l.total_ns(), 150.0);
        assert_eq!(latency(&r, 1).total_ns(), 100.0);
    }

    #[test]
    fn throughput_sums_flows() {
        let r = [
            rec(0, 1, 0, 0, 0, 0, 500_000_000),
            rec(1, 1, 0, 0, 0, 0, 1_000_000_000),
            rec(2, 2, 0, 0, 0, 0, 500_000_000),
        ];
        assert_eq!(throughput(&r, &BTreeMap::new()), 4.0);
        // a dropped first packet still opens the flow's span
        assert_eq!(throughput(&r, &BTreeMap::from([(1, 0), (2, 0)])), 4.0);
        assert_eq!(throughput(&r[..2], &BTreeMap::from([(1, 0)])), 2.0);
    }

    #[test]
    fn windows_bucket_by_release() {
        let r = [rec(0, 1, 0, 0, 0, 0, 5 * MS), rec(1, 1, 0, 0, 0, 0, 15 * MS)];
        let w = windows(&r, 10 * MS, 20 * MS);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].throughput_pps, 100.0);
        assert_eq!(w[1].latency_ns, (15 * MS) as f64);
    }
}
