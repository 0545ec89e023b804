//! Seeded arrival schedules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Action, ArrivalProcess, ExperimentConfig};
use crate::model::{FlowKey, Nanos};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub time: Nanos,
    /// Index into the traffic's flow keys.
    pub flow: u32,
    pub payload_len: u32,
    pub global: bool,
}

/// Deterministic 5-tuple of traffic flow `i`.
pub fn flow_key(i: u32) -> FlowKey {
    FlowKey::new(0x0a00_0000 | i, 0xc0a8_0001, 10_000u16.wrapping_add(i as u16), 5_000, 17)
}

pub fn flow_keys(cfg: &ExperimentConfig) -> Vec<FlowKey> {
    (0..cfg.traffic.flow_count).map(flow_key).collect()
}

/// Batch-window positions (1-based) that carry a global update.
pub fn flag_positions(batch: u32, updates: u32) -> Vec<u32> {
    (1..=updates).map(|k| ((k as f64 * batch as f64 / updates as f64).round() as u32).max(1)).collect()
}

/// Piecewise-constant rate; maps cumulative packet "work" to time.
struct RateCurve {
    /// `(start_ns, rate_pps)`, sorted by start.
    segments: Vec<(Nanos, f64)>,
}

impl RateCurve {
    fn new(cfg: &ExperimentConfig) -> Self {
        let mut segments = vec![(0, cfg.traffic.rate_pps)];
        let mut changes: Vec<(Nanos, f64)> = cfg
            .scenario
            .iter()
            .filter(|d| d.action == Action::SetRate)
            .map(|d| (d.at_ns, d.rate_pps.expect("validated")))
            .collect();
        changes.sort_by_key(|c| c.0);
        segments.extend(changes);
        Self { segments }
    }

    /// Time at which `units` packet-slots have elapsed.
    fn time_of(&self, units: f64) -> Nanos {
        let mut acc = 0.0;
        for (i, &(start, rate)) in self.segments.iter().enumerate() {
            let end = self.segments.get(i + 1).map(|s| s.0);
            let span_units = end.map(|e| (e - start) as f64 * rate / 1e9);
            match span_units {
                Some(u) if acc + u <= units => acc += u,
                _ => return start + ((units - acc) * 1e9 / rate).round() as Nanos,
            }
        }
        unreachable!("last segment is open-ended")
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Vec<Arrival> {
    let t = &cfg.traffic;
    let n = cfg.run.packet_count as usize;
    let flows = t.flow_count as usize;
    let curve = RateCurve::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x0074_7261_6666_6963);

    // Arrival slots in units of one aggregate inter-arrival gap.
    let mut slots: Vec<(f64, u32)> = Vec::with_capacity(n);
    match t.arrival {
        ArrivalProcess::Periodic => {
            let phases: Vec<f64> = (0..flows).map(|_| rng.gen::<f64>()).collect();
            let per_flow = n.div_ceil(flows);
            for (f, &ph) in phases.iter().enumerate() {
                for k in 0..per_flow {
                    slots.push(((ph + k as f64) * flows as f64, f as u32));
                }
            }
            slots.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            slots.truncate(n);
        }
        ArrivalProcess::Poisson => {
            let mut s = 0.0;
            for i in 0..n {
                let u: f64 = rng.gen();
                s += -(1.0 - u).ln();
                slots.push((s, (i % flows) as u32));
            }
        }
        ArrivalProcess::Bursty => {
            let mean = t.train_len;
            // inside a train, in units of the aggregate gap
            let step = t.train_gap_ns as f64 * t.rate_pps / 1e9;
            let mut start = 0.0;
            let mut times = Vec::with_capacity(n);
            while times.len() < n {
                let u: f64 = rng.gen();
                start += -(1.0 - u).ln() * mean;
                let v: f64 = rng.gen();
                let len = if mean <= 1.0 { 1 } else { 1 + ((1.0 - v).ln() / (1.0 - 1.0 / mean).ln()) as usize };
                times.extend((0..len).map(|k| start + k as f64 * step));
            }
            times.sort_by(f64::total_cmp);
            times.truncate(n);
            slots.extend(times.into_iter().enumerate().map(|(i, s)| (s, (i % flows) as u32)));
        }
    }

    let flags = flag_positions(cfg.nf.batch_size, t.updates_per_batch);
    let burst = t.burst_at..t.burst_at.saturating_add(t.burst_len);
    slots
        .into_iter()
        .enumerate()
        .map(|(i, (s, flow))| {
            let pos = (i as u32 % cfg.nf.batch_size) + 1;
            Arrival {
                time: curve.time_of(s),
                flow,
                payload_len: t.payload_len,
                global: flags.contains(&pos) || burst.contains(&(i as u64)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Directive;

    fn cfg(rate: f64, flows: u32, n: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.traffic.rate_pps = rate;
        c.traffic.flow_count = flows;
        c.run.packet_count = n;
        c
    }

    #[test]
    fn one_second_at_ten_thousand() {
        let a = generate(&cfg(10_000.0, 1, 20_000));
        let in_first_second = a.iter().filter(|x| x.time < 1_000_000_000).count();
        assert_eq!(in_first_second, 10_000);
    }

    #[test]
    fn flows_split_evenly() {
        let a = generate(&cfg(12_000.0, 100, 12_000));
        let mut per = vec![0usize; 100];
        for x in &a {
            per[x.flow as usize] += 1;
        }
        assert!(per.iter().all(|&c| c == 120), "{per:?}");
    }

    #[test]
    fn ten_updates_in_fifty() {
        assert_eq!(flag_positions(50, 10), vec![5, 10, 15, 20, 25, 30, 35, 40, 45, 50]);
        let mut c = cfg(10_000.0, 1, 500);
        c.traffic.updates_per_batch = 10;
        let a = generate(&c);
        for w in a.chunks(50) {
            assert_eq!(w.iter().filter(|x| x.global).count(), 10);
        }
    }

    #[test]
    fn rate_change_stretches_gaps() {
        let mut c = cfg(1_000.0, 1, 20);
        c.scenario.push(Directive {
            at_ns: 10_000_000,
            action: Action::SetRate,
            nf: None,
            node: None,
            unit: None,
            flows: vec![],
            target: None,
            rate_pps: Some(500.0),
        });
        let a = generate(&c);
        let gaps: Vec<Nanos> = a.windows(2).map(|w| w[1].time - w[0].time).collect();
        assert_eq!(gaps[0], 1_000_000);
        assert_eq!(*gaps.last().unwrap(), 2_000_000);
    }

    #[test]
    fn bursty_keeps_mean_rate() {
        let mut c = cfg(10_000.0, 4, 50_000);
        c.traffic.arrival = ArrivalProcess::Bursty;
        c.traffic.train_len = 20.0;
        let a = generate(&c);
        let span = a.last().unwrap().time as f64 / 1e9;
        let rate = a.len() as f64 / span;
        assert!((rate - 10_000.0).abs() / 10_000.0 < 0.05, "{rate}");
        assert!(a.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn burst_flags_consecutive_arrivals() {
        let mut c = cfg(10_000.0, 4, 300);
        c.traffic.burst_at = 100;
        c.traffic.burst_len = 50;
        let a = generate(&c);
        let idx: Vec<usize> = a.iter().enumerate().filter(|(_, x)| x.global).map(|(i, _)| i).collect();
        assert_eq!(idx, (100..150).collect::<Vec<_>>());
    }
}
