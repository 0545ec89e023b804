//! Run configuration: a TOML document of dotted keys (`nf.batch_size`, ...).

use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusImpl;
use crate::model::{Nanos, MS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    /// Replay re-issues global updates the log already holds.
    SkipGlobalMarker,
    /// Batches are released before the packet clock commits.
    ReleaseBeforeCommit,
    /// Packets are processed in arrival order, ignoring the pending list.
    BypassPendingList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Fixed per-flow spacing with seeded phase offsets.
    #[default]
    Periodic,
    /// Seeded exponential gaps at the same mean rate.
    Poisson,
    /// Poisson-timed trains of geometric length (`traffic.train_len` mean),
    /// packets inside a train `traffic.train_gap_ns` apart.
    Bursty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub packet_count: u64,
    pub tracked_n: u64,
    pub mutation: Mutation,
    pub drain_delay_ns: Nanos,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1, packet_count: 50_000, tracked_n: 50_000, mutation: Mutation::None, drain_delay_ns: MS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficSection {
    pub rate_pps: f64,
    pub flow_count: u32,
    pub payload_len: u32,
    pub updates_per_batch: u32,
    pub arrival: ArrivalProcess,
    /// Arrival index where a run of consecutive global updates begins.
    pub burst_at: u64,
    pub burst_len: u64,
    pub train_len: f64,
    pub train_gap_ns: Nanos,
}

impl Default for TrafficSection {
    fn default() -> Self {
        Self {
            rate_pps: 10_000.0,
            flow_count: 1,
            payload_len: 64,
            updates_per_batch: 0,
            arrival: ArrivalProcess::Periodic,
            burst_at: 0,
            burst_len: 0,
            train_len: 10.0,
            train_gap_ns: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StamperSection {
    pub unit_count: u32,
    /// `[start_ns, end_ns]` pairs.
    pub manager_failure_windows: Vec<[u64; 2]>,
    /// `[start_ns, end_ns, unit_index]` triples.
    pub unit_failure_windows: Vec<[u64; 3]>,
}

impl Default for StamperSection {
    fn default() -> Self {
        Self { unit_count: 1, manager_failure_windows: Vec::new(), unit_failure_windows: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub base_latency_ns: Nanos,
    pub jitter_ns: Nanos,
    pub reorder_prob: f64,
    pub reorder_penalty_ns: Nanos,
    pub ctrl_latency_ns: Nanos,
    /// Overrides the seed derived from `run.seed`.
    pub seed: Option<u64>,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            base_latency_ns: 100_000,
            jitter_ns: 0,
            reorder_prob: 0.0,
            reorder_penalty_ns: 500_000,
            ctrl_latency_ns: 300_000,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NfSection {
    pub batch_size: u32,
    /// Input capacity in batches; 0 means unbounded.
    pub buffer_batches: u32,
    pub work_cost_ns: Nanos,
    pub global_keys: u64,
    pub primaries: u32,
    /// Physical nodes; 0 picks `primaries + 1` (at least 2).
    pub nodes: u32,
}

impl Default for NfSection {
    fn default() -> Self {
        Self { batch_size: 50, buffer_batches: 5, work_cost_ns: 50_000, global_keys: 1, primaries: 1, nodes: 0 }
    }
}

impl NfSection {
    pub fn node_count(&self) -> u32 {
        if self.nodes == 0 {
            (self.primaries + 1).max(2)
        } else {
            self.nodes
        }
    }

    pub fn input_capacity(&self) -> Option<usize> {
        (self.buffer_batches > 0).then(|| (self.buffer_batches * self.batch_size) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusSection {
    #[serde(rename = "impl")]
    pub implementation: ConsensusImpl,
    pub commit_latency_ns: Nanos,
    pub replicas: u32,
    pub quorum_size: u32,
    pub outage_windows: Vec<[u64; 2]>,
}

impl Default for ConsensusSection {
    fn default() -> Self {
        Self {
            implementation: ConsensusImpl::Sequencer,
            commit_latency_ns: 0,
            replicas: 3,
            quorum_size: 2,
            outage_windows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub ping_interval_ns: Nanos,
    pub suspect_threshold: u32,
    pub spare_nfs: u32,
    /// Fire a migration when input occupancy stays high.
    pub scale_policy: bool,
    pub scale_occupancy: f64,
    pub scale_batches: u32,
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            ping_interval_ns: 10 * MS,
            suspect_threshold: 3,
            spare_nfs: 1,
            scale_policy: false,
            scale_occupancy: 0.8,
            scale_batches: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    FailNf,
    FailNode,
    FailUnit,
    RecoverUnit,
    FailManager,
    RecoverManager,
    Migrate,
    SetRate,
}

/// A timed directive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Directive {
    pub at_ns: Nanos,
    pub action: Action,
    #[serde(default)]
    pub nf: Option<u32>,
    #[serde(default)]
    pub node: Option<u32>,
    #[serde(default)]
    pub unit: Option<u32>,
    /// Traffic flow indexes (0-based) to migrate.
    #[serde(default)]
    pub flows: Vec<u32>,
    #[serde(default)]
    pub target: Option<u32>,
    #[serde(default)]
    pub rate_pps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Right after the n-th packet finished processing.
    Processed,
    /// Output buffer full, before the packet clock is prepared.
    BatchFull,
    /// Packet clock prepared, commit not yet decided.
    PcPrepared,
    /// Packet clock committed, state clock not yet started.
    PcCommitted,
    /// State clock prepared, commit not yet sent.
    ScPrepared,
    /// Global update submitted, no answer yet.
    GlobalSubmitted,
}

/// Crash `nf` the `nth` time it reaches `phase`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashPoint {
    pub nf: u32,
    pub phase: Phase,
    pub nth: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub traffic: TrafficSection,
    pub stamper: StamperSection,
    pub net: NetSection,
    pub nf: NfSection,
    pub consensus: ConsensusSection,
    pub control: ControlSection,
    pub scenario: Vec<Directive>,
    pub crash: Vec<CrashPoint>,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `s` after setting each dotted `key = value` override.
    pub fn from_toml_with(s: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, v)?;
        }
        Self::from_toml(&table.to_string())
    }

    /// This config with one dotted override applied.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(&self.to_toml(), &[(key.to_string(), value.to_string())])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn total_nfs(&self) -> u32 {
        2 * self.nf.primaries + self.control.spare_nfs
    }

    pub fn net_seed(&self) -> u64 {
        self.net.seed.unwrap_or(self.run.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x006e_6574)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nf.batch_size == 0 {
            return Err(invalid("nf.batch_size", "must be at least 1"));
        }
        if self.nf.primaries == 0 {
            return Err(invalid("nf.primaries", "must be at least 1"));
        }
        if self.nf.node_count() < 2 {
            return Err(invalid("nf.nodes", "primary and secondary need two distinct nodes"));
        }
        if self.nf.global_keys == 0 {
            return Err(invalid("nf.global_keys", "must be at least 1"));
        }
        if !(self.traffic.rate_pps > 0.0 && self.traffic.rate_pps.is_finite()) {
            return Err(invalid("traffic.rate_pps", "must be a positive number"));
        }
        if !(self.traffic.train_len >= 1.0 && self.traffic.train_len.is_finite()) {
            return Err(invalid("traffic.train_len", "must be at least 1"));
        }
        if self.traffic.flow_count == 0 {
            return Err(invalid("traffic.flow_count", "must be at least 1"));
        }
        if self.traffic.payload_len == 0 {
            return Err(invalid("traffic.payload_len", "must be positive"));
        }
        if self.traffic.updates_per_batch > self.nf.batch_size {
            return Err(invalid("traffic.updates_per_batch", "cannot exceed nf.batch_size"));
        }
        if self.stamper.unit_count == 0 {
            return Err(invalid("stamper.unit_count", "must be at least 1"));
        }
        for w in &self.stamper.unit_failure_windows {
            if w[2] >= self.stamper.unit_count as u64 {
                return Err(invalid("stamper.unit_failure_windows", format!("unit {} out of range", w[2])));
            }
            if w[0] > w[1] {
                return Err(invalid("stamper.unit_failure_windows", "start after end"));
            }
        }
        if !(0.0..=1.0).contains(&self.net.reorder_prob) {
            return Err(invalid("net.reorder_prob", "must lie in [0, 1]"));
        }
        if self.consensus.replicas == 0 {
            return Err(invalid("consensus.replicas", "must be at least 1"));
        }
        if self.consensus.quorum_size == 0 || self.consensus.quorum_size > self.consensus.replicas {
            return Err(invalid("consensus.quorum_size", "must lie in 1..=consensus.replicas"));
        }
        if self.control.ping_interval_ns == 0 {
            return Err(invalid("control.ping_interval_ns", "must be positive"));
        }
        if self.control.suspect_threshold == 0 {
            return Err(invalid("control.suspect_threshold", "must be at least 1"));
        }
        let nfs = self.total_nfs();
        for d in &self.scenario {
            match d.action {
                Action::FailNf if d.nf.is_none_or(|n| n >= nfs) => {
                    return Err(invalid("scenario.nf", "fail_nf needs an existing nf"));
                }
                Action::FailNode if d.node.is_none_or(|n| n >= self.nf.node_count()) => {
                    return Err(invalid("scenario.node", "fail_node needs an existing node"));
                }
                Action::FailUnit | Action::RecoverUnit if d.unit.is_none_or(|u| u >= self.stamper.unit_count) => {
                    return Err(invalid("scenario.unit", "needs an existing stamping unit"));
                }
                Action::Migrate => {
                    if d.target.is_some_and(|t| t >= nfs) {
                        return Err(invalid("scenario.target", "migrate target must be an existing nf"));
                    }
                    if d.flows.is_empty() || d.flows.iter().any(|&f| f >= self.traffic.flow_count) {
                        return Err(invalid("scenario.flows", "migrate needs valid flow indexes"));
                    }
                }
                Action::SetRate if !d.rate_pps.is_some_and(|r| r > 0.0) => {
                    return Err(invalid("scenario.rate_pps", "set_rate needs a positive rate"));
                }
                _ => {}
            }
        }
        for c in &self.crash {
            if c.nf >= nfs {
                return Err(invalid("crash.nf", format!("nf {} does not exist", c.nf)));
            }
            if c.nth == 0 {
                return Err(invalid("crash.nth", "occurrences count from 1"));
            }
        }
        Ok(())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    }
}

fn set_path(table: &mut toml::Table, path: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = path.split('.').collect();
    let (last, dirs) = parts.split_last().expect("split yields one part");
    let mut t = table;
    for d in dirs {
        let entry = t.entry(d.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| ConfigError::Parse(format!("override {path}: {d} is not a table")))?;
    }
    let mut v = parse_scalar(raw);
    // floats written without a decimal point
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (t.get(*last), &v) {
        v = toml::Value::Float(*i as f64);
    }
    t.insert(last.to_string(), v);
    Ok(())
}
