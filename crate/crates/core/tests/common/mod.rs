//! Random experiment configurations shared by the randomized suites.

use nfstate::config::{Action, CrashPoint, Directive, ExperimentConfig};
use nfstate::consensus::ConsensusImpl;
use nfstate::harness::experiments as ex;
use nfstate::model::MS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn directive(at_ns: u64, action: Action) -> Directive {
    Directive { at_ns, action, nf: None, node: None, unit: None, flows: vec![], target: None, rate_pps: None }
}

pub struct Shape {
    pub faults: u32,
    pub migrations: u32,
}

pub fn random_config(seed: u64, shape: Shape) -> ExperimentConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = ex::base();
    c.run.seed = seed;
    c.run.packet_count = rng.gen_range(500..4000);
    c.run.tracked_n = c.run.packet_count;
    c.traffic.flow_count = rng.gen_range(1..12);
    c.traffic.updates_per_batch = rng.gen_range(0..4);
    c.traffic.rate_pps = rng.gen_range(4000.0..14000.0);
    c.nf.primaries = rng.gen_range(1..4);
    c.nf.batch_size = [5u32, 10, 20, 50][rng.gen_range(0..4)];
    c.nf.buffer_batches = rng.gen_range(0..4);
    c.nf.global_keys = rng.gen_range(1..4);
    c.control.spare_nfs = rng.gen_range(0..3);
    c.net.reorder_prob = rng.gen_range(0.0..0.3);
    c.net.reorder_penalty_ns = rng.gen_range(100_000..3_000_000);
    c.net.jitter_ns = rng.gen_range(0..100_000);
    if rng.gen_bool(0.3) {
        c.consensus.implementation = ConsensusImpl::Quorum;
        c.consensus.commit_latency_ns = rng.gen_range(0..500_000);
    }
    let nfs = c.total_nfs();
    let dur = (c.run.packet_count as f64 / c.traffic.rate_pps * 1e9) as u64;
    c.stamper.unit_count = rng.gen_range(1..=3);
    if rng.gen_bool(0.2) {
        let at = rng.gen_range(0..dur);
        c.stamper.unit_failure_windows.push([at, at + 30 * MS, rng.gen_range(0..c.stamper.unit_count) as u64]);
    }
    if rng.gen_bool(0.1) {
        c.stamper.manager_failure_windows.push([dur / 2, dur / 2 + 10 * MS]);
    }
    for _ in 0..rng.gen_range(0..=shape.faults) {
        match rng.gen_range(0..5) {
            0 | 1 => {
                let phase = ex::CRASH_PHASES[rng.gen_range(0..ex::CRASH_PHASES.len())];
                c.crash.push(CrashPoint { nf: rng.gen_range(0..nfs), phase, nth: rng.gen_range(1..30) });
            }
            2 | 3 => {
                let mut d = directive(rng.gen_range(0..dur), Action::FailNf);
                d.nf = Some(rng.gen_range(0..nfs));
                c.scenario.push(d);
            }
            _ => {
                // a node hosts at most one member of each pair
                let mut d = directive(rng.gen_range(0..dur), Action::FailNode);
                d.node = Some(rng.gen_range(0..c.nf.node_count()));
                c.scenario.push(d);
            }
        }
    }
    for _ in 0..rng.gen_range(0..=shape.migrations) {
        let mut d = directive(rng.gen_range(0..dur), Action::Migrate);
        d.flows = vec![rng.gen_range(0..c.traffic.flow_count)];
        c.scenario.push(d);
    }
    if rng.gen_bool(0.2) {
        c.consensus.outage_windows = vec![[dur / 3, dur / 3 + 20 * MS]];
    }
    c.validate().expect("generated config is valid");
    c
}
