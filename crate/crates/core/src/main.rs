use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nfstate::config::ExperimentConfig;
use nfstate::harness::{self, metrics};
use nfstate::model::{read_trace, trace_hash, write_trace, MS};
use nfstate::oracle::Verdict;

#[derive(Parser)]
#[command(name = "nfstate", version, about = "Replicated NF state simulator and checker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Dotted override, e.g. `--set nf.batch_size=20`. Repeatable.
    #[arg(long = "set", value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and check it against the oracle.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write the JSON-lines trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the verdict JSON here.
        #[arg(long)]
        verdict: Option<PathBuf>,
    },
    /// Run the cartesian product of one or more parameter grids.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,...`. Repeatable.
        #[arg(long, value_parser = parse_kv, required = true)]
        grid: Vec<(String, String)>,
        /// Seeds per grid point, starting at `run.seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// CSV output (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-window throughput and latency over one run.
    Timelapse {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        window_ms: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a recorded trace against the oracle.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        verdict: Option<PathBuf>,
    },
    /// Re-run a config and compare its trace hash with a recorded trace.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

/// Input problems exit with 2, verdict failures with 1.
enum Fail {
    Input(String),
    Verdict,
}

impl<E: std::fmt::Display> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail::Input(e.to_string())
    }
}

fn load(c: &Common) -> Result<ExperimentConfig, Fail> {
    let text = std::fs::read_to_string(&c.config).map_err(|e| Fail::Input(format!("{}: {e}", c.config.display())))?;
    Ok(ExperimentConfig::from_toml_with(&text, &c.set)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), Fail> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    Ok(())
}

fn summarize(v: &Verdict) {
    println!(
        "verdict: {} ({} packets, {} releases, {} findings)",
        if v.pass { "PASS" } else { "FAIL" },
        v.packets_checked,
        v.releases_checked,
        v.findings.len()
    );
    for f in v.findings.iter().take(10) {
        println!("  {:?}: {}", f.kind, f.detail);
    }
}

fn verdict_result(v: &Verdict) -> Result<(), Fail> {
    if v.pass {
        Ok(())
    } else {
        Err(Fail::Verdict)
    }
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Fail> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn cmd_run(common: &Common, trace: &Option<PathBuf>, verdict: &Option<PathBuf>) -> Result<(), Fail> {
    let cfg = load(common)?;
    let r = harness::run(&cfg);
    if let Some(p) = trace {
        write_trace(BufWriter::new(File::create(p)?), &r.output.trace)?;
    }
    if let Some(p) = verdict {
        write_json(p, &r.verdict)?;
    }
    println!("{}", serde_json::to_string(&r.metrics)?);
    println!("trace: {} events, hash {}", r.output.trace.len(), trace_hash(&r.output.trace));
    summarize(&r.verdict);
    verdict_result(&r.verdict)
}

fn cmd_sweep(common: &Common, grid: &[(String, String)], seeds: u64, out: &Option<PathBuf>) -> Result<(), Fail> {
    let base = load(common)?;
    let axes: Vec<(String, Vec<String>)> =
        grid.iter().map(|(k, vs)| (k.clone(), vs.split(',').map(|v| v.trim().to_string()).collect())).collect();
    let mut points: Vec<Vec<(String, String)>> = vec![vec![]];
    for (k, vs) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                vs.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let mut cfgs = Vec::new();
    for p in &points {
        for s in 0..seeds {
            let mut c = base.clone();
            for (k, v) in p {
                c = c.with_override(k, v)?;
            }
            c.run.seed = base.run.seed + s;
            cfgs.push((p.clone(), c));
        }
    }
    let rows = harness::par_map(&cfgs, |(p, c)| {
        let r = harness::run(c);
        (p.clone(), c.run.seed, r.metrics, r.verdict.pass)
    });
    let mut w = open_out(out)?;
    let keys: Vec<&str> = axes.iter().map(|(k, _)| k.as_str()).collect();
    writeln!(w, "{},seed,{},pass", keys.join(","), metrics::Metrics::CSV_HEADER)?;
    let mut all_pass = true;
    for (p, seed, m, pass) in &rows {
        let vals: Vec<&str> = p.iter().map(|(_, v)| v.as_str()).collect();
        writeln!(w, "{},{seed},{},{pass}", vals.join(","), m.csv_row())?;
        all_pass &= pass;
    }
    w.flush()?;
    if all_pass {
        Ok(())
    } else {
        Err(Fail::Verdict)
    }
}

fn cmd_timelapse(common: &Common, window_ms: u64, out: &Option<PathBuf>) -> Result<(), Fail> {
    let cfg = load(common)?;
    let r = harness::run(&cfg);
    let ws = metrics::windows(&r.output.releases, window_ms * MS, r.output.end_time);
    let mut w = open_out(out)?;
    writeln!(w, "window_start_ms,throughput_pps,latency_ns")?;
    for x in ws {
        writeln!(w, "{},{:.1},{:.0}", x.start_ns / MS, x.throughput_pps, x.latency_ns)?;
    }
    w.flush()?;
    drop(w);
    if !r.verdict.pass {
        summarize(&r.verdict);
    }
    verdict_result(&r.verdict)
}

fn cmd_verify(common: &Common, trace: &Path, verdict: &Option<PathBuf>) -> Result<(), Fail> {
    let cfg = load(common)?;
    let events = read_trace(BufReader::new(File::open(trace)?))?;
    let v = harness::check_trace(&cfg, &events);
    if let Some(p) = verdict {
        write_json(p, &v)?;
    }
    summarize(&v);
    verdict_result(&v)
}

fn cmd_replay(common: &Common, trace: &Path) -> Result<(), Fail> {
    let cfg = load(common)?;
    let recorded = read_trace(BufReader::new(File::open(trace)?))?;
    let fresh = nfstate::sim::simulate(&cfg).trace;
    let (a, b) = (trace_hash(&recorded), trace_hash(&fresh));
    println!("recorded {a}\nreplayed {b}");
    if a == b {
        println!("replay: identical");
        Ok(())
    } else {
        let at = recorded.iter().zip(&fresh).position(|(x, y)| x != y).unwrap_or(recorded.len().min(fresh.len()));
        println!("replay: diverges at event {at}");
        Err(Fail::Verdict)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run { common, trace, verdict } => cmd_run(common, trace, verdict),
        Cmd::Sweep { common, grid, seeds, out } => cmd_sweep(common, grid, *seeds, out),
        Cmd::Timelapse { common, window_ms, out } => cmd_timelapse(common, *window_ms, out),
        Cmd::Verify { common, trace, verdict } => cmd_verify(common, trace, verdict),
        Cmd::Replay { common, trace } => cmd_replay(common, trace),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Verdict) => ExitCode::from(1),
        Err(Fail::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
