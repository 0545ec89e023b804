//! Controller: placement, failure detection, failover and migration.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::config::ExperimentConfig;
use crate::fabric::{LinkClass, RuleTable};
use crate::model::{Actor, EventKind, Nanos, NfId};
use crate::nf::Role;
use crate::sim::{Ctx, Ev, Msg};

#[derive(Debug, Clone)]
pub enum CtlMsg {
    Ping,
    /// Become the backup of `primary`.
    AssignRole {
        primary: NfId,
    },
    /// Take over the flows of the failed primary this NF was backing.
    Promote {
        new_secondary: Option<NfId>,
    },
    /// The previous backup failed; resync to this one.
    AssignSecondary {
        secondary: Option<NfId>,
    },
    MigrateOut {
        flow: u64,
        dst: NfId,
    },
    FlipDone {
        flow: u64,
    },
    MigrateAbort {
        flow: u64,
    },
}

#[derive(Debug, Clone)]
pub enum Report {
    Pong,
    MigrateCommitted {
        flow: u64,
    },
    /// Input-buffer occupancy at a batch boundary, in `[0, 1]`.
    Occupancy(f64),
}

/// NF-to-node mapping and primary/backup pairs.
#[derive(Debug, Clone, Default)]
pub struct Placement {
    pub node_of: BTreeMap<NfId, u32>,
    pub pairs: BTreeMap<NfId, Option<NfId>>,
}

impl Placement {
    /// Primary `k` on node `k mod N`, its backup on `(k+1) mod N`,
    /// spare `s` on node `s mod N`.
    pub fn initial(primaries: u32, spares: u32, nodes: u32) -> Self {
        let mut p = Placement::default();
        for k in 0..primaries {
            p.node_of.insert(NfId(k), k % nodes);
            p.node_of.insert(NfId(primaries + k), (k + 1) % nodes);
            p.pairs.insert(NfId(k), Some(NfId(primaries + k)));
        }
        for s in 0..spares {
            p.node_of.insert(NfId(2 * primaries + s), s % nodes);
        }
        p
    }

    /// Pairs whose two members share a node.
    pub fn violations(&self) -> Vec<(NfId, NfId)> {
        self.pairs
            .iter()
            .filter_map(|(&p, &s)| s.map(|s| (p, s)))
            .filter(|(p, s)| self.node_of[p] == self.node_of[s])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ActiveMigration {
    flow: u64,
    src: NfId,
    dst: NfId,
}

pub struct Controller {
    pub placement: Placement,
    backup_of: BTreeMap<NfId, NfId>,
    spares: Vec<NfId>,
    all: Vec<NfId>,
    last_seen: BTreeMap<NfId, Nanos>,
    pub declared: BTreeSet<NfId>,
    ping_interval: Nanos,
    threshold: u32,
    last_tick: Nanos,
    rr: usize,
    queue: VecDeque<(u64, NfId)>,
    active: Option<ActiveMigration>,
    scale_enabled: bool,
    scale_occupancy: f64,
    scale_batches: u32,
    streak: BTreeMap<NfId, u32>,
    scaled: BTreeSet<NfId>,
}

impl Controller {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let p = cfg.nf.primaries;
        let placement = Placement::initial(p, cfg.control.spare_nfs, cfg.nf.node_count());
        let backup_of = placement.pairs.iter().filter_map(|(&k, &s)| s.map(|s| (s, k))).collect();
        let all: Vec<NfId> = (0..cfg.total_nfs()).map(NfId).collect();
        Self {
            placement,
            backup_of,
            spares: (2 * p..cfg.total_nfs()).map(NfId).collect(),
            last_seen: all.iter().map(|&n| (n, 0)).collect(),
            all,
            declared: BTreeSet::new(),
            ping_interval: cfg.control.ping_interval_ns,
            threshold: cfg.control.suspect_threshold,
            last_tick: 0,
            rr: 0,
            queue: VecDeque::new(),
            active: None,
            scale_enabled: cfg.control.scale_policy,
            scale_occupancy: cfg.control.scale_occupancy,
            scale_batches: cfg.control.scale_batches,
            streak: BTreeMap::new(),
            scaled: BTreeSet::new(),
        }
    }

    pub fn initial_role(&self, nf: NfId) -> Role {
        if self.placement.pairs.contains_key(&nf) {
            Role::Primary
        } else if self.backup_of.contains_key(&nf) {
            Role::Secondary
        } else {
            Role::Spare
        }
    }

    pub fn initial_secondary(&self, nf: NfId) -> Option<NfId> {
        self.placement.pairs.get(&nf).copied().flatten()
    }

    pub fn nfs_on_node(&self, node: u32) -> Vec<NfId> {
        self.placement.node_of.iter().filter(|(_, &n)| n == node).map(|(&nf, _)| nf).collect()
    }

    fn primaries(&self) -> Vec<NfId> {
        self.placement.pairs.keys().copied().collect()
    }

    /// Round-robin owner for a flow the switch has no rule for. False when
    /// no primary is left.
    pub fn install_default_rule(&mut self, rules: &mut RuleTable, flow: u64) -> bool {
        let prim = self.primaries();
        if prim.is_empty() {
            return false;
        }
        let p = prim[self.rr % prim.len()];
        self.rr += 1;
        rules.update_rule(flow, p, self.placement.pairs[&p]).expect("pairs never share an nf");
        true
    }

    fn send(ctx: &mut Ctx, to: NfId, msg: CtlMsg) {
        ctx.send(Actor::Controller, Actor::Nf(to), LinkClass::Control, Msg::Ctl(msg));
    }

    /// Pings everyone, declares failures, and reschedules itself while needed.
    pub fn fdu_tick(&mut self, ctx: &mut Ctx, rules: &mut RuleTable, busy: bool) {
        let now = ctx.now();
        let limit = self.threshold as Nanos * self.ping_interval;
        let failed: Vec<NfId> = self
            .all
            .iter()
            .copied()
            .filter(|n| !self.declared.contains(n) && now - self.last_seen[n] > limit)
            .collect();
        for n in failed {
            self.declare(ctx, rules, n);
        }
        let suspects = self.all.iter().any(|n| !self.declared.contains(n) && self.last_seen[n] < self.last_tick);
        for &n in &self.all {
            if !self.declared.contains(&n) {
                Self::send(ctx, n, CtlMsg::Ping);
            }
        }
        self.last_tick = now;
        if busy || suspects || self.active.is_some() || !self.queue.is_empty() {
            ctx.sched.after(self.ping_interval, Ev::FduTick);
        }
    }

    fn take_spare(&mut self, avoid_node: u32) -> Option<NfId> {
        let pos = self.spares.iter().position(|s| self.placement.node_of[s] != avoid_node)?;
        Some(self.spares.remove(pos))
    }

    fn declare(&mut self, ctx: &mut Ctx, rules: &mut RuleTable, x: NfId) {
        self.declared.insert(x);
        self.spares.retain(|&s| s != x);
        if let Some(backup) = self.placement.pairs.remove(&x) {
            self.fail_primary(ctx, rules, x, backup);
        } else if let Some(primary) = self.backup_of.remove(&x) {
            self.fail_secondary(ctx, rules, primary, x);
        }
        for (p, s) in self.placement.violations() {
            ctx.notes.push(format!("placement: {p} and {s} share a node"));
        }
    }

    fn fail_primary(&mut self, ctx: &mut Ctx, rules: &mut RuleTable, x: NfId, backup: Option<NfId>) {
        if let Some(m) = self.active {
            if m.dst == x {
                Self::send(ctx, m.src, CtlMsg::MigrateAbort { flow: m.flow });
                self.active = None;
            } else if m.src == x {
                // the backup still mirrors the flow and keeps it
                ctx.notes.push(format!("degraded: migration of flow {} abandoned, source {x} failed", m.flow));
                self.active = None;
            }
        }
        let Some(b) = backup.filter(|b| !self.declared.contains(b)) else {
            ctx.notes.push(format!("unrecoverable: {x} failed with no live secondary"));
            self.start_next(ctx, rules);
            return;
        };
        self.backup_of.remove(&b);
        let c = self.take_spare(self.placement.node_of[&b]);
        if c.is_none() {
            ctx.notes.push(format!("degraded: {b} promoted without a secondary"));
        }
        for flow in rules.flows_with_primary(x) {
            rules.update_rule(flow, b, c).expect("spare differs from primary");
        }
        self.placement.pairs.insert(b, c);
        if let Some(c) = c {
            self.backup_of.insert(c, b);
            Self::send(ctx, c, CtlMsg::AssignRole { primary: b });
        }
        Self::send(ctx, b, CtlMsg::Promote { new_secondary: c });
        ctx.stats.failovers += 1;
        self.start_next(ctx, rules);
    }

    fn fail_secondary(&mut self, ctx: &mut Ctx, rules: &mut RuleTable, primary: NfId, x: NfId) {
        if self.declared.contains(&primary) {
            return;
        }
        let _ = x;
        let c = self.take_spare(self.placement.node_of[&primary]);
        if c.is_none() {
            ctx.notes.push(format!("degraded: {primary} lost its secondary"));
        }
        for flow in rules.flows_with_primary(primary) {
            rules.update_rule(flow, primary, c).expect("spare differs from primary");
        }
        self.placement.pairs.insert(primary, c);
        if let Some(c) = c {
            self.backup_of.insert(c, primary);
            Self::send(ctx, c, CtlMsg::AssignRole { primary });
        }
        Self::send(ctx, primary, CtlMsg::AssignSecondary { secondary: c });
    }

    /// Least-loaded live primary other than the flow's owner.
    pub fn other_primary(&self, rules: &RuleTable, flow: u64) -> Option<NfId> {
        let owner = rules.lookup(flow).map(|r| r.primary_nf);
        self.primaries()
            .into_iter()
            .filter(|&p| Some(p) != owner)
            .min_by_key(|&p| (rules.flows_with_primary(p).len(), p))
    }

    pub fn request_migrations(&mut self, ctx: &mut Ctx, rules: &RuleTable, flows: &[u64], target: NfId) {
        self.queue.extend(flows.iter().map(|&f| (f, target)));
        self.start_next(ctx, rules);
    }

    fn start_next(&mut self, ctx: &mut Ctx, rules: &RuleTable) {
        while self.active.is_none() {
            let Some((flow, dst)) = self.queue.pop_front() else { return };
            let Some(rule) = rules.lookup(flow) else { continue };
            let src = rule.primary_nf;
            if src == dst || !self.placement.pairs.contains_key(&dst) || self.declared.contains(&src) {
                continue;
            }
            self.active = Some(ActiveMigration { flow, src, dst });
            ctx.emit(Actor::Controller, EventKind::MigrationStart, None, None);
            Self::send(ctx, src, CtlMsg::MigrateOut { flow, dst });
        }
    }

    pub fn on_report(&mut self, ctx: &mut Ctx, rules: &mut RuleTable, from: NfId, report: Report) {
        match report {
            Report::Pong => {
                self.last_seen.insert(from, ctx.now());
            }
            Report::MigrateCommitted { flow } => {
                let Some(m) = self.active.filter(|m| m.flow == flow && m.src == from) else { return };
                let secondary = self.placement.pairs.get(&m.dst).copied().flatten();
                rules.update_rule(flow, m.dst, secondary).expect("pairs never share an nf");
                Self::send(ctx, m.src, CtlMsg::FlipDone { flow });
                ctx.stats.migrations += 1;
                ctx.emit(Actor::Controller, EventKind::MigrationDone, None, None);
                self.active = None;
                self.start_next(ctx, rules);
            }
            Report::Occupancy(frac) => {
                if !self.scale_enabled || !self.placement.pairs.contains_key(&from) {
                    return;
                }
                let s = self.streak.entry(from).or_insert(0);
                *s = if frac > self.scale_occupancy { *s + 1 } else { 0 };
                if *s >= self.scale_batches && !self.scaled.contains(&from) && self.active.is_none() {
                    let target = self
                        .primaries()
                        .into_iter()
                        .filter(|&p| p != from)
                        .min_by_key(|p| (self.streak.get(p).copied().unwrap_or(0), *p));
                    let flow = rules.flows_with_primary(from).first().copied();
                    if let (Some(target), Some(flow)) = (target, flow) {
                        self.scaled.insert(from);
                        self.request_migrations(ctx, rules, &[flow], target);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_placement_separates_pairs() {
        for primaries in 1..6 {
            for nodes in 2..8 {
                let p = Placement::initial(primaries, 2, nodes);
                assert!(p.violations().is_empty(), "p={primaries} n={nodes}");
            }
        }
    }

    #[test]
    fn spare_choice_avoids_backup_node() {
        let mut cfg = ExperimentConfig::default();
        cfg.control.spare_nfs = 2;
        let mut c = Controller::new(&cfg);
        // nf1 (backup of nf0) is on node 1; spares nf2 on node 0, nf3 on node 1
        assert_eq!(c.take_spare(1), Some(NfId(2)));
        assert_eq!(c.take_spare(1), None);
        assert_eq!(c.take_spare(0), Some(NfId(3)));
    }

    #[test]
    fn round_robin_default_rules() {
        let mut cfg = ExperimentConfig::default();
        cfg.nf.primaries = 3;
        let mut c = Controller::new(&cfg);
        let mut rules = RuleTable::new();
        for f in 0..6 {
            c.install_default_rule(&mut rules, f);
        }
        let owners: Vec<u32> = (0..6).map(|f| rules.lookup(f).unwrap().primary_nf.0).collect();
        assert_eq!(owners, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(rules.lookup(4).unwrap().secondary_nf, Some(NfId(4)));
    }
}
