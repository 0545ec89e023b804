//! Running configured experiments and checking them against the oracle.

pub mod experiments;
pub mod metrics;
pub mod traffic;

use crate::config::ExperimentConfig;
use crate::model::TraceEvent;
use crate::oracle::{self, Finding, FindingKind, OracleResult, Verdict};
use crate::sim::{self, RunOutput};

pub use metrics::Metrics;

/// A finished run together with its verdict and metrics.
pub struct Report {
    pub output: RunOutput,
    pub verdict: Verdict,
    pub metrics: Metrics,
}

/// Checks a trace produced by `cfg`, regenerating its arrival schedule.
pub fn check_trace(cfg: &ExperimentConfig, trace: &[TraceEvent]) -> Verdict {
    let arrivals = traffic::generate(cfg);
    match expected(cfg, trace, &arrivals) {
        Ok((n, expect)) => {
            let findings = oracle::compare_trace(trace, &expect, cfg.nf.global_keys);
            Verdict::from_findings(findings, n, release_count(&expect))
        }
        Err(f) => Verdict::from_findings(vec![f], 0, 0),
    }
}

/// Full check: trace comparison plus end-of-run state.
pub fn check_run(cfg: &ExperimentConfig, out: &RunOutput) -> Verdict {
    match expected(cfg, &out.trace, &out.arrivals) {
        Ok((n, expect)) => {
            let mut findings = oracle::compare_trace(&out.trace, &expect, cfg.nf.global_keys);
            findings.extend(oracle::compare_final(&out.final_state, &out.trace, &expect, &out.notes));
            Verdict::from_findings(findings, n, release_count(&expect))
        }
        Err(f) => Verdict::from_findings(vec![f], 0, 0),
    }
}

fn expected(
    cfg: &ExperimentConfig,
    trace: &[TraceEvent],
    arrivals: &[traffic::Arrival],
) -> Result<(usize, OracleResult), Finding> {
    let corrupt =
        |e: oracle::OracleError| Finding { kind: FindingKind::InputCorruption, detail: e.to_string(), event: None };
    let stream = oracle::stamped_stream(trace, arrivals).map_err(corrupt)?;
    let dropped = oracle::effective_drops(trace);
    let expect = oracle::run_oracle(&stream, &dropped, cfg.nf.global_keys).map_err(corrupt)?;
    Ok((stream.len(), expect))
}

fn release_count(o: &OracleResult) -> usize {
    o.releases.values().map(Vec::len).sum()
}

pub fn run(cfg: &ExperimentConfig) -> Report {
    let output = sim::simulate(cfg);
    let verdict = check_run(cfg, &output);
    let metrics = metrics::metrics(&output, cfg.run.tracked_n);
    Report { output, verdict, metrics }
}

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// Results keep the input order either way.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq_map(items, f)
    }
}

/// Sequential `par_map`.
pub fn seq_map<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}
