//! Calibrated experiment presets and the sweeps built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Action, ArrivalProcess, ConfigError, CrashPoint, Directive, ExperimentConfig, Phase};
use crate::harness::metrics::{self, Metrics, Window};
use crate::harness::{self, par_map, Report};
use crate::model::{Nanos, MS};

/// Cost model: 50 µs per packet, batch 50, 5 batches of input buffer,
/// 300 µs control links (so a packet-clock round trip halts for 1.2 ms).
pub fn base() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.packet_count = 50_000;
    c.run.tracked_n = 50_000;
    c.traffic.rate_pps = 10_000.0;
    c.nf.batch_size = 50;
    c.nf.buffer_batches = 5;
    c.nf.work_cost_ns = 50_000;
    c.net.ctrl_latency_ns = 300_000;
    c
}

pub const BATCH_SIZES: [u32; 5] = [10, 20, 50, 100, 200];
pub const BUFFER_BATCHES: [u32; 6] = [1, 2, 3, 4, 5, 6];
pub const FLOW_COUNTS: [u32; 5] = [120, 240, 360, 480, 540];
pub const UPDATES_PER_BATCH: [u32; 4] = [1, 5, 10, 15];

/// Batch sweep runs with an unbounded buffer so latency carries the cost.
pub fn batch_sweep_base() -> ExperimentConfig {
    let mut c = base();
    c.nf.buffer_batches = 0;
    c
}

/// Bursty sender: trains of 8 packets on average, 35 µs apart inside a
/// train. Drops vanish at 5 batches of input buffer.
pub fn buffer_sweep_base(rate_pps: f64) -> ExperimentConfig {
    let mut c = base();
    c.traffic.arrival = ArrivalProcess::Bursty;
    c.traffic.train_len = 8.0;
    c.traffic.train_gap_ns = 35_000;
    c.traffic.rate_pps = rate_pps;
    c
}

pub const BUFFER_SWEEP_RATE: f64 = 10_800.0;
pub const BUFFER_SWEEP_RATES: [f64; 4] = [9_000.0, 10_000.0, 10_800.0, 11_500.0];

pub fn flow_sweep_base() -> ExperimentConfig {
    base()
}

pub const LOW_RATE: f64 = 3_000.0;
pub const HIGH_RATE: f64 = 10_000.0;

/// Update-frequency sweep; unbounded buffer so throughput is the service rate.
pub fn update_sweep_base(rate_pps: f64) -> ExperimentConfig {
    let mut c = base();
    c.traffic.rate_pps = rate_pps;
    c.nf.buffer_batches = 0;
    c.run.packet_count = 20_000;
    c.run.tracked_n = 20_000;
    c
}

pub const TIMELAPSE_WINDOW: Nanos = 100 * MS;
pub const BURST_AT: u64 = 20_000;

pub fn timelapse_base(burst: u64) -> ExperimentConfig {
    let mut c = base();
    c.nf.buffer_batches = 20;
    c.traffic.burst_at = BURST_AT;
    c.traffic.burst_len = burst;
    c
}

/// Results of one grid point across seeds.
#[derive(Debug, Clone)]
pub struct Point {
    pub value: String,
    pub runs: Vec<Metrics>,
    pub all_pass: bool,
}

impl Point {
    pub fn mean(&self, f: impl Fn(&Metrics) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len().max(1) as f64
    }
}

/// Runs `key` over `values`, `seeds` runs each (seeds 1..=seeds).
pub fn sweep(base: &ExperimentConfig, key: &str, values: &[String], seeds: u64) -> Result<Vec<Point>, ConfigError> {
    let mut cfgs = Vec::new();
    for v in values {
        let c = base.with_override(key, v)?;
        for s in 1..=seeds {
            let mut c = c.clone();
            c.run.seed = s;
            cfgs.push(c);
        }
    }
    let reports = par_map(&cfgs, |c| {
        let r = harness::run(c);
        (r.metrics, r.verdict.pass)
    });
    Ok(values
        .iter()
        .zip(reports.chunks(seeds as usize))
        .map(|(v, rs)| Point {
            value: v.clone(),
            runs: rs.iter().map(|r| r.0).collect(),
            all_pass: rs.iter().all(|r| r.1),
        })
        .collect())
}

pub fn values<T: ToString>(xs: &[T]) -> Vec<String> {
    xs.iter().map(ToString::to_string).collect()
}

/// Windowed view of a burst run.
#[derive(Debug, Clone)]
pub struct Timelapse {
    pub windows: Vec<Window>,
    pub pre_throughput: f64,
    pub pre_latency: f64,
    /// Lowest windowed throughput from the burst onwards.
    pub dip: f64,
    pub post_throughput: f64,
    pub post_latency: f64,
    pub pass: bool,
}

/// Windows ending before `from` count as pre-burst (the first is warm-up);
/// post-burst windows start one second after the burst and stop before the
/// traffic ends.
pub fn timelapse(cfg: &ExperimentConfig) -> Timelapse {
    let r: Report = harness::run(cfg);
    let w = TIMELAPSE_WINDOW;
    let windows = metrics::windows(&r.output.releases, w, r.output.end_time);
    let burst_t = r.output.arrivals.get(cfg.traffic.burst_at as usize).map_or(0, |a| a.time);
    let last_t = r.output.arrivals.last().map_or(0, |a| a.time);
    let burst_w = (burst_t / w) as usize;
    let last_w = (last_t / w) as usize;
    let mean = |ws: &[Window], f: fn(&Window) -> f64| ws.iter().map(f).sum::<f64>() / ws.len().max(1) as f64;
    let pre = &windows[1.min(burst_w)..burst_w];
    let post_from = (burst_w + (1_000 * MS / w) as usize).min(last_w);
    let post = &windows[post_from..last_w];
    Timelapse {
        pre_throughput: mean(pre, |x| x.throughput_pps),
        pre_latency: mean(pre, |x| x.latency_ns),
        dip: windows[burst_w..=last_w.min(windows.len() - 1)]
            .iter()
            .map(|x| x.throughput_pps)
            .fold(f64::INFINITY, f64::min),
        post_throughput: mean(post, |x| x.throughput_pps),
        post_latency: mean(post, |x| x.latency_ns),
        pass: r.verdict.pass,
        windows,
    }
}

/// Random ordering stress: reordering links, several flows and primaries,
/// unbounded buffers so every stamped packet must be processed.
pub fn ordering_config(seed: u64) -> ExperimentConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = base();
    c.run.seed = seed;
    c.run.packet_count = 1_500;
    c.run.tracked_n = 1_500;
    c.net.reorder_prob = rng.gen_range(0.0..=0.3);
    c.net.jitter_ns = rng.gen_range(0..=50_000);
    c.traffic.flow_count = rng.gen_range(1..=20);
    // long enough to overtake several packets of the same flow
    let flow_gap = 1e9 / c.traffic.rate_pps * c.traffic.flow_count as f64;
    c.net.reorder_penalty_ns = (flow_gap * rng.gen_range(1.5..4.0)) as u64;
    c.traffic.updates_per_batch = rng.gen_range(0..=3);
    c.nf.primaries = rng.gen_range(1..=5);
    c.nf.batch_size = *[10u32, 20, 50].get(rng.gen_range(0..3)).expect("in range");
    c.nf.buffer_batches = 0;
    c.stamper.unit_count = rng.gen_range(1..=3);
    c
}

pub const CRASH_PHASES: [Phase; 6] = [
    Phase::Processed,
    Phase::BatchFull,
    Phase::PcPrepared,
    Phase::PcCommitted,
    Phase::ScPrepared,
    Phase::GlobalSubmitted,
];

/// One crash schedule: primary 0 dies at the `nth` visit of `phase`.
pub fn crash_config(phase: Phase, nth: u32, seed: u64) -> ExperimentConfig {
    let mut c = base();
    c.run.seed = seed;
    c.run.packet_count = 3_000;
    c.run.tracked_n = 3_000;
    c.traffic.flow_count = 4;
    c.traffic.updates_per_batch = 2;
    c.nf.buffer_batches = 0;
    c.net.reorder_prob = 0.05;
    c.crash.push(CrashPoint { nf: 0, phase, nth });
    c
}

/// The same schedule with no crash injected.
pub fn crash_free(mut c: ExperimentConfig) -> ExperimentConfig {
    c.crash.clear();
    c
}

/// At least `n` crash schedules over every phase.
pub fn crash_schedules(n: usize) -> Vec<ExperimentConfig> {
    let per_phase = n.div_ceil(CRASH_PHASES.len());
    let mut out = Vec::new();
    for (pi, &phase) in CRASH_PHASES.iter().enumerate() {
        for k in 0..per_phase {
            // nth visit spread over the run: early, mid-run and late
            let nth = match phase {
                Phase::Processed => 7 + 37 * k as u32,
                Phase::GlobalSubmitted => 1 + 3 * k as u32,
                _ => 1 + k as u32,
            };
            out.push(crash_config(phase, nth, 1 + (pi * per_phase + k) as u64));
        }
    }
    out
}

/// Flows and timing of the migration scenario.
pub const MIGRATION_FLOWS: u32 = 64;

/// Two primaries, one migrated flow; `migrate = false` is the control run.
pub fn migration_config(seed: u64, migrate: bool) -> ExperimentConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d69_6772);
    let mut c = base();
    c.run.seed = seed;
    c.run.packet_count = 20_000;
    c.run.tracked_n = 20_000;
    c.traffic.flow_count = MIGRATION_FLOWS;
    c.traffic.rate_pps = 10_000.0;
    c.nf.primaries = 2;
    c.nf.buffer_batches = 0;
    c.net.reorder_prob = 0.1;
    if migrate {
        let flow = rng.gen_range(0..MIGRATION_FLOWS);
        let at = rng.gen_range(1_600..1_800) * MS;
        c.scenario.push(Directive {
            at_ns: at,
            action: Action::Migrate,
            nf: None,
            node: None,
            unit: None,
            flows: vec![flow],
            target: None,
            rate_pps: None,
        });
    }
    c
}
